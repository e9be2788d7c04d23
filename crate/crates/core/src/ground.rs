//! Ground plane extraction from a key-frame's local map: box segmentation,
//! RANSAC seeding, then a covariance-weighted Gauss-Newton fit in CP form.

use nalgebra::{Matrix3, RowVector3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::plane::{PlaneCP, PlaneHF, CP_MIN_NORM};
use crate::sliding_map::SlidingMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundCandidate {
    pub position: Vector3<f64>,
    pub covariance: Matrix3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundObservation {
    /// Ground plane in the key-frame's sensor frame.
    pub plane: PlaneCP,
    /// Uncertainty of `plane`, m².
    pub covariance: Matrix3<f64>,
    pub support_count: usize,
    pub mean_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundConfig {
    pub box_half_extent: f64,
    pub z_band: f64,
    pub min_ground_points: usize,
    /// Smallest share of the candidates the RANSAC plane must explain.
    pub min_support_fraction: f64,
    pub ransac_iterations: usize,
    pub ransac_inlier_dist: f64,
    pub ransac_seed: u64,
    pub max_iter: usize,
    pub step_tol: f64,
    pub nonconvergence_tol: f64,
}

impl Default for GroundConfig {
    fn default() -> Self {
        Self {
            box_half_extent: 10.0,
            z_band: 0.5,
            min_ground_points: 100,
            min_support_fraction: 0.7,
            ransac_iterations: 200,
            ransac_inlier_dist: 0.05,
            ransac_seed: 0x5eed,
            max_iter: 20,
            step_tol: 1e-8,
            nonconvergence_tol: 1e-4,
        }
    }
}

/// Map points inside the sensor-centred box `|x|, |y| <= box_half_extent`,
/// `|z - ground_z| <= z_band`.
pub fn segment_ground_candidates(map: &SlidingMap, ground_z: f64, cfg: &GroundConfig) -> Result<Vec<GroundCandidate>> {
    let out: Vec<GroundCandidate> = map
        .points
        .iter()
        .filter(|p| {
            let x = p.position;
            x.x.abs() <= cfg.box_half_extent && x.y.abs() <= cfg.box_half_extent && (x.z - ground_z).abs() <= cfg.z_band
        })
        .map(|p| GroundCandidate {
            position: p.position,
            covariance: p.covariance,
        })
        .collect();
    if out.len() < cfg.min_ground_points {
        return Err(Error::NoGroundCandidates {
            found: out.len(),
            required: cfg.min_ground_points,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacPlane {
    pub plane: PlaneCP,
    pub inliers: Vec<usize>,
}

/// Best-consensus plane over `iterations` random 3-point hypotheses.
pub fn ransac_plane_seed(
    candidates: &[GroundCandidate],
    iterations: usize,
    inlier_dist: f64,
    seed: u64,
) -> Result<RansacPlane> {
    let n = candidates.len();
    if n < 3 {
        return Err(Error::DegenerateCandidates);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, PlaneHF)> = None;
    for _ in 0..iterations {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let mut c = rng.random_range(0..n - 2);
        for taken in [a.min(b), a.max(b)] {
            if c >= taken {
                c += 1;
            }
        }
        let (pa, pb, pc) = (candidates[a].position, candidates[b].position, candidates[c].position);
        let (ab, ac) = (pb - pa, pc - pa);
        let cross = ab.cross(&ac);
        if !(cross.norm() > 1e-9 * ab.norm() * ac.norm()) {
            continue;
        }
        let normal = cross / cross.norm();
        let hf = PlaneHF::new(normal, normal.dot(&pa))?;
        let count = candidates
            .iter()
            .filter(|c| (hf.normal.dot(&c.position) - hf.dist).abs() <= inlier_dist)
            .count();
        if best.is_none_or(|(bc, _)| count > bc) {
            best = Some((count, hf));
        }
    }
    let (_, hf) = best.ok_or(Error::DegenerateCandidates)?;
    let plane = hf.to_cp()?;
    let inliers = candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| (hf.normal.dot(&c.position) - hf.dist).abs() <= inlier_dist)
        .map(|(i, _)| i)
        .collect();
    Ok(RansacPlane { plane, inliers })
}

/// Point-to-plane residual of `p` against the CP plane `pi`.
pub fn plane_point_residual(p: &Vector3<f64>, pi: &Vector3<f64>) -> f64 {
    let d = pi.norm();
    p.dot(pi) / d - d
}

/// `∂ residual / ∂Π = pᵀ/|Π| − Πᵀ/|Π| − (pᵀΠ) Πᵀ/|Π|³`.
pub fn plane_point_jacobian(p: &Vector3<f64>, pi: &Vector3<f64>) -> RowVector3<f64> {
    let d = pi.norm();
    (p.transpose() - pi.transpose()) / d - pi.transpose() * (p.dot(pi) / (d * d * d))
}

/// Inverse residual variance `(Πᵀ Σ_p Π / |Π|²)⁻¹`.
pub fn residual_weight(cov: &Matrix3<f64>, pi: &Vector3<f64>) -> f64 {
    let var = pi.dot(&(cov * pi)) / pi.norm_squared();
    1.0 / var.max(1e-12)
}

fn weighted_cost(candidates: &[GroundCandidate], pi: &Vector3<f64>) -> f64 {
    candidates
        .iter()
        .map(|c| {
            let r = plane_point_residual(&c.position, pi);
            r * r * residual_weight(&c.covariance, pi)
        })
        .sum()
}

/// Outcome of the weighted fit, with the per-iteration cost trace.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneFit {
    pub observation: GroundObservation,
    pub iterations: usize,
    pub cost_history: Vec<f64>,
}

pub fn refine_plane_wls(candidates: &[GroundCandidate], seed: &PlaneCP, cfg: &GroundConfig) -> Result<GroundObservation> {
    refine_plane_wls_traced(candidates, seed, cfg).map(|f| f.observation)
}

/// Gauss-Newton on the weighted point-to-plane cost with weights evaluated at
/// the current linearization point. Steps that would raise the cost are
/// halved; when no shorter step helps the current estimate is the minimum.
pub fn refine_plane_wls_traced(candidates: &[GroundCandidate], seed: &PlaneCP, cfg: &GroundConfig) -> Result<PlaneFit> {
    if candidates.len() < cfg.min_ground_points.max(3) {
        return Err(Error::NoGroundCandidates {
            found: candidates.len(),
            required: cfg.min_ground_points.max(3),
        });
    }
    let mut pi = *seed.vector();
    let mut cost = weighted_cost(candidates, &pi);
    let mut history = vec![cost];
    let mut last_step = f64::INFINITY;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        let (h, g) = normal_equations(candidates, &pi);
        let Some(h_inv) = h.try_inverse() else {
            return Err(Error::NonConvergence { iterations, step: f64::NAN });
        };
        let full = -(h_inv * g);
        iterations += 1;
        let mut step = full;
        let mut accepted = false;
        for _ in 0..12 {
            let cand = pi + step;
            if cand.norm() >= CP_MIN_NORM {
                let c = weighted_cost(candidates, &cand);
                if c <= cost {
                    pi = cand;
                    cost = c;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            last_step = 0.0;
            break;
        }
        history.push(cost);
        last_step = step.norm();
        if last_step < cfg.step_tol {
            break;
        }
    }
    if last_step > cfg.nonconvergence_tol {
        return Err(Error::NonConvergence {
            iterations,
            step: last_step,
        });
    }
    let plane = PlaneCP::new(pi)?;
    let (h, _) = normal_equations(candidates, &pi);
    let covariance = h.try_inverse().ok_or(Error::NonInvertibleCovariance)?;
    let mean_residual = candidates
        .iter()
        .map(|c| plane_point_residual(&c.position, &pi).abs())
        .sum::<f64>()
        / candidates.len() as f64;
    Ok(PlaneFit {
        observation: GroundObservation {
            plane,
            covariance: (covariance + covariance.transpose()) * 0.5,
            support_count: candidates.len(),
            mean_residual,
        },
        iterations,
        cost_history: history,
    })
}

fn normal_equations(candidates: &[GroundCandidate], pi: &Vector3<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    let mut h = Matrix3::zeros();
    let mut g = Vector3::zeros();
    for c in candidates {
        let j = plane_point_jacobian(&c.position, pi);
        let w = residual_weight(&c.covariance, pi);
        let r = plane_point_residual(&c.position, pi);
        h += j.transpose() * j * w;
        g += j.transpose() * (w * r);
    }
    (h, g)
}

/// Segmentation, RANSAC seed and weighted refinement over the seed's inliers.
pub fn extract_ground(map: &SlidingMap, ground_z: f64, cfg: &GroundConfig) -> Result<GroundObservation> {
    let candidates = segment_ground_candidates(map, ground_z, cfg)?;
    let seed = ransac_plane_seed(&candidates, cfg.ransac_iterations, cfg.ransac_inlier_dist, cfg.ransac_seed)?;
    let support: Vec<GroundCandidate> = seed.inliers.iter().map(|&i| candidates[i]).collect();
    log::debug!("ground: {} of {} candidates support the seed", support.len(), candidates.len());
    if (support.len() as f64) < cfg.min_support_fraction * candidates.len() as f64 {
        // a slope or step inside the box: no single plane describes the ground
        return Err(Error::NonPlanarGround {
            support: support.len(),
            candidates: candidates.len(),
        });
    }
    refine_plane_wls(&support, &seed.plane, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3xX, SymmetricEigen};
    use rand_distr::{Distribution, Normal, Uniform};

    use crate::sliding_map::MapPoint;

    fn cand(p: Vector3<f64>, var: f64) -> GroundCandidate {
        GroundCandidate {
            position: p,
            covariance: Matrix3::identity() * var,
        }
    }

    fn floor(n: usize, sigma: f64, seed: u64) -> Vec<GroundCandidate> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new(-8.0, 8.0).unwrap();
        let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
        (0..n)
            .map(|_| {
                let z = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                cand(Vector3::new(u.sample(&mut rng), u.sample(&mut rng), -1.5 + z), sigma.max(0.01).powi(2))
            })
            .collect()
    }

    /// Oracle: total-least-squares plane through the centroid.
    fn svd_plane(points: &[Vector3<f64>]) -> Vector3<f64> {
        let c = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
        let m = Matrix3xX::from_columns(&points.iter().map(|p| p - c).collect::<Vec<_>>());
        let eig = SymmetricEigen::new(&m * m.transpose());
        let k = eig.eigenvalues.imin();
        let n: Vector3<f64> = eig.eigenvectors.column(k).into();
        n * n.dot(&c)
    }

    #[test]
    fn box_segmentation() {
        let mut pts = Vec::new();
        for i in -20..=20 {
            for j in -20..=20 {
                pts.push(Vector3::new(i as f64, j as f64, -1.5));
            }
            pts.push(Vector3::new(i as f64, 3.0, 0.5));
        }
        let map = SlidingMap {
            points: pts
                .iter()
                .map(|&p| MapPoint { position: p, covariance: Matrix3::identity() * 1e-4, birth_frame: 0 })
                .collect(),
            frame_id: 0,
        };
        let c = segment_ground_candidates(&map, -1.5, &GroundConfig::default()).unwrap();
        assert_eq!(c.len(), 21 * 21);
        assert!(c.iter().all(|c| c.position.z == -1.5));
        assert!(matches!(
            segment_ground_candidates(&SlidingMap::default(), -1.5, &GroundConfig::default()),
            Err(Error::NoGroundCandidates { found: 0, .. })
        ));
    }

    #[test]
    fn ramp_points_stay_in_box() {
        let slope = 10f64.to_radians().tan();
        let pts: Vec<Vector3<f64>> = (0..400)
            .map(|i| {
                let x = (i % 20) as f64 * 0.2 - 2.0;
                Vector3::new(x, (i / 20) as f64 * 0.5 - 5.0, -1.5 + slope * x)
            })
            .collect();
        let map = SlidingMap {
            points: pts
                .iter()
                .map(|&p| MapPoint { position: p, covariance: Matrix3::identity() * 1e-4, birth_frame: 0 })
                .collect(),
            frame_id: 0,
        };
        let c = segment_ground_candidates(&map, -1.5, &GroundConfig::default()).unwrap();
        let oracle = pts.iter().filter(|p| p.x.abs() <= 10.0 && p.y.abs() <= 10.0 && (p.z + 1.5).abs() <= 0.5).count();
        assert_eq!(c.len(), oracle);
        assert_eq!(c.len(), 400);
    }

    #[test]
    fn ransac_noiseless_is_exact() {
        let c = floor(200, 0.0, 1);
        let r = ransac_plane_seed(&c, 200, 0.05, 9).unwrap();
        assert_eq!(*r.plane.vector(), Vector3::new(0.0, 0.0, -1.5));
        assert_eq!(r.inliers.len(), 200);
    }

    #[test]
    fn ransac_collinear_fails() {
        let c: Vec<_> = (0..3).map(|i| cand(Vector3::new(i as f64, 1.0, -1.0), 1e-4)).collect();
        assert!(matches!(ransac_plane_seed(&c, 50, 0.05, 1), Err(Error::DegenerateCandidates)));
    }

    #[test]
    fn ransac_through_origin_is_singular() {
        let c: Vec<_> = (0..50).map(|i| cand(Vector3::new((i % 7) as f64, (i / 7) as f64, 0.0), 1e-4)).collect();
        assert!(matches!(ransac_plane_seed(&c, 50, 0.05, 1), Err(Error::SingularPlane { .. })));
    }

    #[test]
    fn ransac_rejects_slab_outliers() {
        // 40 exact floor points + 10 points spread through a 2 m slab.
        let mut c = floor(40, 0.0, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = Uniform::new(-8.0, 8.0).unwrap();
        let h = Uniform::new(-0.5, 1.5).unwrap();
        for _ in 0..10 {
            c.push(cand(Vector3::new(u.sample(&mut rng), u.sample(&mut rng), -1.5 + h.sample(&mut rng)), 1e-4));
        }
        // Oracle: enumerate every 3-point hypothesis and take the best count.
        let count = |n: Vector3<f64>, d: f64| c.iter().filter(|p| (n.dot(&p.position) - d).abs() <= 0.05).count();
        let mut best = 0;
        for a in 0..c.len() {
            for b in a + 1..c.len() {
                for k in b + 1..c.len() {
                    let cr = (c[b].position - c[a].position).cross(&(c[k].position - c[a].position));
                    if cr.norm() > 1e-9 {
                        let n = cr.normalize();
                        best = best.max(count(n, n.dot(&c[a].position)));
                    }
                }
            }
        }
        let r = ransac_plane_seed(&c, 200, 0.05, 11).unwrap();
        assert_eq!(r.inliers.len(), best);
        let outliers_far: Vec<usize> = (40..50).filter(|&i| (c[i].position.z + 1.5).abs() > 0.05).collect();
        assert!(outliers_far.iter().all(|i| !r.inliers.contains(i)));
    }

    #[test]
    fn wls_noiseless_fixed_point() {
        let c = floor(500, 0.0, 2);
        let seed = PlaneCP::new(Vector3::new(0.02, -0.03, -1.45)).unwrap();
        let obs = refine_plane_wls(&c, &seed, &GroundConfig::default()).unwrap();
        assert_relative_eq!(*obs.plane.vector(), Vector3::new(0.0, 0.0, -1.5), epsilon = 1e-10);
        assert!(obs.mean_residual < 1e-10);
    }

    #[test]
    fn wls_matches_svd_fit_and_its_own_covariance() {
        let c = floor(1000, 0.02, 3);
        let seed = ransac_plane_seed(&c, 200, 0.05, 1).unwrap();
        let obs = refine_plane_wls(&c, &seed.plane, &GroundConfig::default()).unwrap();
        let oracle = svd_plane(&c.iter().map(|c| c.position).collect::<Vec<_>>());
        assert!((obs.plane.vector() - oracle).norm() < 1e-3);
        let err = (obs.plane.vector() - Vector3::new(0.0, 0.0, -1.5)).norm();
        assert!(err < 3.0 * obs.covariance.trace().sqrt());
    }

    #[test]
    fn wls_prefers_low_noise_points() {
        // Near points: σ = 0.01 on z = -1.5. Far points: σ = 0.1, biased up by
        // 0.05 so that an unweighted fit is pulled toward them.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let near_u = Uniform::new(-4.0, 4.0).unwrap();
        let far_u = Uniform::new(5.0, 9.0).unwrap();
        let n1 = Normal::new(0.0, 0.01).unwrap();
        let n2 = Normal::new(0.0, 0.1).unwrap();
        let mut c = Vec::new();
        for _ in 0..300 {
            c.push(cand(Vector3::new(near_u.sample(&mut rng), near_u.sample(&mut rng), -1.5 + n1.sample(&mut rng)), 1e-4));
            c.push(cand(Vector3::new(far_u.sample(&mut rng), near_u.sample(&mut rng), -1.45 + n2.sample(&mut rng)), 1e-2));
        }
        let obs = refine_plane_wls(&c, &PlaneCP::new(Vector3::new(0.0, 0.0, -1.5)).unwrap(), &GroundConfig::default()).unwrap();
        let unweighted = svd_plane(&c.iter().map(|c| c.position).collect::<Vec<_>>());
        let near: Vec<_> = c.iter().step_by(2).map(|c| c.position).collect();
        let rms = |pi: &Vector3<f64>| (near.iter().map(|p| plane_point_residual(p, pi).powi(2)).sum::<f64>() / near.len() as f64).sqrt();
        assert!(rms(obs.plane.vector()) < rms(&unweighted));
    }

    #[test]
    fn cost_is_non_increasing() {
        let c = floor(800, 0.03, 12);
        let seed = PlaneCP::new(Vector3::new(0.3, -0.2, -1.2)).unwrap();
        let fit = refine_plane_wls_traced(&c, &seed, &GroundConfig::default()).unwrap();
        for w in fit.cost_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn candidate_order_does_not_matter() {
        let c = floor(600, 0.02, 21);
        let mut rev = c.clone();
        rev.reverse();
        let seed = PlaneCP::new(Vector3::new(0.0, 0.0, -1.4)).unwrap();
        let a = refine_plane_wls(&c, &seed, &GroundConfig::default()).unwrap();
        let b = refine_plane_wls(&rev, &seed, &GroundConfig::default()).unwrap();
        assert!((a.plane.vector() - b.plane.vector()).norm() < 1e-9);
    }

    fn map_of(pts: &[Vector3<f64>]) -> SlidingMap {
        SlidingMap {
            points: pts
                .iter()
                .map(|&p| MapPoint { position: p, covariance: Matrix3::identity() * 1e-4, birth_frame: 0 })
                .collect(),
            frame_id: 0,
        }
    }

    #[test]
    fn step_in_the_box_is_rejected() {
        // a 0.3 m step, both levels inside the height band
        let mut pts = Vec::new();
        for i in -40..=40 {
            for j in -20..=20 {
                let x = i as f64 * 0.25;
                let z = if x < 0.0 { -1.5 } else { -1.8 };
                pts.push(Vector3::new(x, j as f64 * 0.25, z));
            }
        }
        let cfg = GroundConfig::default();
        assert!(matches!(extract_ground(&map_of(&pts), -1.5, &cfg), Err(Error::NonPlanarGround { .. })));
        let flat: Vec<_> = pts.iter().map(|p| Vector3::new(p.x, p.y, -1.5)).collect();
        let obs = extract_ground(&map_of(&flat), -1.5, &cfg).unwrap();
        assert!((obs.plane.vector() - Vector3::new(0.0, 0.0, -1.5)).norm() < 1e-9);
    }
}
