//! Point-to-plane ICP against the sliding map, with a residual-scaled
//! inverse-Hessian covariance for the estimate.

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::se3::{Pose, PoseCovariance};
use crate::sliding_map::SlidingMap;
use crate::spatial::PointIndex;

/// One LiDAR sweep in the sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub points: Vec<Vector3<f64>>,
    pub per_point_cov: Vec<Matrix3<f64>>,
    pub timestamp: f64,
}

impl Scan {
    pub fn new(points: Vec<Vector3<f64>>, per_point_cov: Vec<Matrix3<f64>>, timestamp: f64) -> Result<Self> {
        if points.len() != per_point_cov.len() {
            return Err(Error::InvalidInput(format!(
                "{} points but {} covariances",
                points.len(),
                per_point_cov.len()
            )));
        }
        Ok(Self {
            points,
            per_point_cov,
            timestamp,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Scan {
        Scan {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            per_point_cov: indices.iter().map(|&i| self.per_point_cov[i]).collect(),
            timestamp: self.timestamp,
        }
    }

    /// Expresses the scan in another frame (covariances rotated along).
    pub fn transformed(&self, pose: &Pose) -> Scan {
        let r = pose.rotation;
        Scan {
            points: self.points.iter().map(|p| pose.transform_point(p)).collect(),
            per_point_cov: self.per_point_cov.iter().map(|c| r * c * r.transpose()).collect(),
            timestamp: self.timestamp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationConfig {
    pub max_corr_dist: f64,
    pub normal_neighbors: usize,
    /// Neighbourhoods wider than this do not yield a normal.
    pub normal_radius: f64,
    pub min_inliers: usize,
    pub max_iter: usize,
    pub convergence_eps: f64,
    /// Eigenvalues of the normal matrix below `cond_floor * λ_max` are
    /// treated as unconstrained.
    pub cond_floor: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            max_corr_dist: 1.0,
            normal_neighbors: 8,
            normal_radius: 2.0,
            min_inliers: 50,
            max_iter: 30,
            convergence_eps: 1e-6,
            cond_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    /// Maps source (scan) points into the target (map) frame.
    pub transform: Pose,
    /// Uncertainty of `transform` under [`Pose::retract_left`].
    pub covariance: PoseCovariance,
    pub inlier_count: usize,
    pub source_count: usize,
    pub rms_residual: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Number of normal-matrix directions that were clamped.
    pub degenerate_dims: usize,
    /// Gauss-Newton normal matrix at the final estimate, `(w, v)` order.
    pub normal_matrix: Matrix6<f64>,
    pub residual_variance: f64,
}

impl RegistrationResult {
    pub fn inlier_fraction(&self) -> f64 {
        if self.source_count == 0 {
            0.0
        } else {
            self.inlier_count as f64 / self.source_count as f64
        }
    }
}

/// Lazily estimated target normals.
struct TargetSurface<'a> {
    positions: Vec<Vector3<f64>>,
    index: PointIndex,
    normals: Vec<Option<Option<Vector3<f64>>>>,
    cfg: &'a RegistrationConfig,
}

impl<'a> TargetSurface<'a> {
    fn new(map: &SlidingMap, cfg: &'a RegistrationConfig) -> Self {
        let positions: Vec<Vector3<f64>> = map.positions().collect();
        let index = PointIndex::new(positions.iter().copied());
        Self {
            normals: vec![None; positions.len()],
            positions,
            index,
            cfg,
        }
    }

    fn normal(&mut self, i: usize) -> Option<Vector3<f64>> {
        if let Some(n) = self.normals[i] {
            return n;
        }
        let n = estimate_normal(&self.index, &self.positions, &self.positions[i], self.cfg);
        self.normals[i] = Some(n);
        n
    }
}

/// Smallest-eigenvector normal of the `k` nearest neighbours of `q`.
pub fn estimate_normal(
    index: &PointIndex,
    positions: &[Vector3<f64>],
    q: &Vector3<f64>,
    cfg: &RegistrationConfig,
) -> Option<Vector3<f64>> {
    let nn = index.nearest_k(q, cfg.normal_neighbors);
    if nn.len() < 3 || nn.last()?.1 > cfg.normal_radius * cfg.normal_radius {
        return None;
    }
    let mean = nn.iter().map(|&(i, _)| positions[i]).sum::<Vector3<f64>>() / nn.len() as f64;
    let cov = nn
        .iter()
        .map(|&(i, _)| {
            let d = positions[i] - mean;
            d * d.transpose()
        })
        .sum::<Matrix3<f64>>();
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (lo, mid, hi) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    if !(hi > 0.0) || mid < 1e-6 * hi {
        return None;
    }
    let _ = lo;
    Some(eig.eigenvectors.column(order[0]).into_owned())
}

/// Residual-variance-scaled pseudo-inverse of the normal matrix, split into
/// rotation and translation blocks. Directions with eigenvalue below
/// `cond_floor · λ_max` use the floor instead, giving a large but finite
/// variance. Returns the covariance and the number of clamped directions.
pub fn estimate_registration_covariance(
    normal_matrix: &Matrix6<f64>,
    residual_variance: f64,
    cond_floor: f64,
) -> (PoseCovariance, usize) {
    let sym = (normal_matrix + normal_matrix.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lmax = eig.eigenvalues.max();
    let floor = (cond_floor * lmax).max(f64::MIN_POSITIVE);
    let mut clamped = 0;
    let mut inv = Matrix6::zeros();
    for k in 0..6 {
        let mut l = eig.eigenvalues[k];
        if l < floor {
            l = floor;
            clamped += 1;
        }
        let v = eig.eigenvectors.column(k);
        inv += v * v.transpose() / l;
    }
    (PoseCovariance::from_matrix6(&(inv * residual_variance)), clamped)
}

/// Solves `H δ = −g` on the well-conditioned subspace of `H` only.
fn solve_clamped(h: &Matrix6<f64>, g: &Vector6<f64>, cond_floor: f64) -> Vector6<f64> {
    let eig = SymmetricEigen::new(*h);
    let lmax = eig.eigenvalues.max();
    let mut delta = Vector6::zeros();
    if !(lmax > 0.0) {
        return delta;
    }
    for k in 0..6 {
        let l = eig.eigenvalues[k];
        if l > cond_floor * lmax {
            let v = eig.eigenvectors.column(k);
            delta -= v * (v.dot(g) / l);
        }
    }
    delta
}

/// Aligns `source` (sensor frame) to `target` (map frame), starting from
/// `initial_guess`. The result maps source points into the map frame.
pub fn register_point_to_plane(
    source: &Scan,
    target: &SlidingMap,
    initial_guess: &Pose,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    if source.len() < cfg.min_inliers || target.is_empty() {
        return Err(Error::InsufficientCorrespondences {
            found: source.len().min(target.len()),
            required: cfg.min_inliers,
        });
    }
    let mut surface = TargetSurface::new(target, cfg);
    let max_d2 = cfg.max_corr_dist * cfg.max_corr_dist;
    let mut pose = *initial_guess;
    let mut converged = false;
    let mut iterations = 0;

    loop {
        let (h, g, sq_sum, inliers) = linearize(source, &mut surface, &pose, max_d2)?;
        if inliers < cfg.min_inliers {
            return Err(Error::InsufficientCorrespondences {
                found: inliers,
                required: cfg.min_inliers,
            });
        }
        if converged || iterations >= cfg.max_iter {
            let residual_variance = sq_sum / (inliers.saturating_sub(6).max(1)) as f64;
            let (covariance, degenerate_dims) =
                estimate_registration_covariance(&h, residual_variance, cfg.cond_floor);
            return Ok(RegistrationResult {
                transform: pose,
                covariance,
                inlier_count: inliers,
                source_count: source.len(),
                rms_residual: (sq_sum / inliers as f64).sqrt(),
                converged,
                iterations,
                degenerate_dims,
                normal_matrix: h,
                residual_variance,
            });
        }
        let delta = solve_clamped(&h, &g, cfg.cond_floor);
        pose = pose.retract_left(&delta);
        iterations += 1;
        if delta.norm() < cfg.convergence_eps {
            converged = true;
        }
    }
}

type Linearization = (Matrix6<f64>, Vector6<f64>, f64, usize);

fn linearize(source: &Scan, surface: &mut TargetSurface<'_>, pose: &Pose, max_d2: f64) -> Result<Linearization> {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    let mut sq_sum = 0.0;
    let mut inliers = 0;
    let mut gated = 0;
    let mut failed = 0;
    for s in &source.points {
        let x = pose.transform_point(s);
        let Some((qi, d2)) = surface.index.nearest(&x) else {
            continue;
        };
        if d2 > max_d2 {
            continue;
        }
        gated += 1;
        let Some(n) = surface.normal(qi) else {
            failed += 1;
            continue;
        };
        let r = n.dot(&(x - surface.positions[qi]));
        let xn = x.cross(&n);
        let j = Vector6::new(xn.x, xn.y, xn.z, n.x, n.y, n.z);
        h += j * j.transpose();
        g += j * r;
        sq_sum += r * r;
        inliers += 1;
    }
    if gated > 0 && 2 * failed > gated {
        return Err(Error::DegenerateNormals { failed, total: gated });
    }
    Ok((h, g, sq_sum, inliers))
}
