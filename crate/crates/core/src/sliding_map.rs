//! Sensor-centric sliding map.
//!
//! The map is always expressed in the current sensor frame. Each step it is
//! re-centred into the new frame with first-order covariance propagation,
//! then maintained against the registered scan: re-observed points get their
//! covariance reset to the observing point's covariance, points whose
//! covariance trace exceeds a threshold are dropped, and unmatched scan
//! points are appended.

use std::io::Write;

use nalgebra::{Matrix3, Vector3};

use crate::registration::Scan;
use crate::se3::{skew, Pose, PoseCovariance};
use crate::spatial::{spacing_filter, PointIndex};

#[derive(Debug, Clone, PartialEq)]
pub struct MapPoint {
    pub position: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub birth_frame: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SlidingMap {
    pub points: Vec<MapPoint>,
    pub frame_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AssociationMetric {
    Euclidean,
    /// Squared Mahalanobis gate under the summed map and scan covariances;
    /// candidates are still restricted to the Euclidean radius.
    Mahalanobis { gate: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaintenanceConfig {
    pub assoc_dist: f64,
    pub metric: AssociationMetric,
    pub elimination_threshold: f64,
    /// Minimum spacing between appended points.
    pub insert_spacing: f64,
}

impl Default for MaintenanceConfig {
    fn default() -> Self {
        Self {
            assoc_dist: 0.3,
            metric: AssociationMetric::Euclidean,
            elimination_threshold: 0.25,
            insert_spacing: 0.2,
        }
    }
}

impl SlidingMap {
    pub fn new(frame_id: u64) -> Self {
        Self {
            points: Vec::new(),
            frame_id,
        }
    }

    /// A map seeded from one scan (density-filtered).
    pub fn from_scan(scan: &Scan, frame_id: u64, insert_spacing: f64) -> Self {
        let mut map = Self::new(frame_id);
        for i in spacing_filter(&scan.points, insert_spacing) {
            map.points.push(MapPoint {
                position: scan.points[i],
                covariance: scan.per_point_cov[i],
                birth_frame: frame_id,
            });
        }
        map
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.points.iter().map(|p| p.position)
    }

    pub fn max_trace(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.covariance.trace())
            .fold(0.0, f64::max)
    }

    /// ASCII PLY with position and the upper triangle of each covariance.
    pub fn write_ply<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", self.points.len())?;
        for name in ["x", "y", "z", "cxx", "cxy", "cxz", "cyy", "cyz", "czz"] {
            writeln!(w, "property double {name}")?;
        }
        writeln!(w, "end_header")?;
        for p in &self.points {
            let (x, c) = (p.position, p.covariance);
            writeln!(
                w,
                "{} {} {} {} {} {} {} {} {}",
                x.x,
                x.y,
                x.z,
                c[(0, 0)],
                c[(0, 1)],
                c[(0, 2)],
                c[(1, 1)],
                c[(1, 2)],
                c[(2, 2)]
            )?;
        }
        Ok(())
    }
}

/// Moves the map from frame `k` into frame `k+1` given `t_k_k1`, which maps
/// frame-`k` points into frame `k+1`, and its uncertainty in the form
/// `(exp(w) R, t + v)`:
///
/// `p' = R p + t`, `Σ' = J_R Σ_R J_Rᵀ + R Σ_p Rᵀ + Σ_t` with `J_R = −(R p)^`.
pub fn recenter(map: &SlidingMap, t_k_k1: &Pose, pose_cov: &PoseCovariance) -> SlidingMap {
    let r = t_k_k1.rotation;
    let points = map
        .points
        .iter()
        .map(|mp| {
            let rp = r * mp.position;
            let jr = -skew(&rp);
            let cov = jr * pose_cov.rot_cov * jr.transpose()
                + r * mp.covariance * r.transpose()
                + pose_cov.trans_cov;
            MapPoint {
                position: rp + t_k_k1.translation,
                covariance: (cov + cov.transpose()) * 0.5,
                birth_frame: mp.birth_frame,
            }
        })
        .collect();
    SlidingMap {
        points,
        frame_id: map.frame_id + 1,
    }
}

/// Per-step maintenance counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MaintenanceStats {
    pub associated: usize,
    pub eliminated: usize,
    pub appended: usize,
}

/// Observation-based maintenance against a scan already expressed in the
/// map's frame.
pub fn maintain(map: &SlidingMap, scan: &Scan, cfg: &MaintenanceConfig) -> SlidingMap {
    maintain_with_stats(map, scan, cfg).0
}

pub fn maintain_with_stats(
    map: &SlidingMap,
    scan: &Scan,
    cfg: &MaintenanceConfig,
) -> (SlidingMap, MaintenanceStats) {
    let mut stats = MaintenanceStats::default();
    // 1) each scan point associates with at most one map point (its nearest
    //    admissible one); a map point keeps the closest scan point that chose it.
    let mut chosen: Vec<Option<(usize, f64)>> = vec![None; map.points.len()];
    let mut scan_matched = vec![false; scan.points.len()];
    if !map.points.is_empty() {
        let index = PointIndex::new(map.positions());
        for (si, sp) in scan.points.iter().enumerate() {
            let hit = match cfg.metric {
                AssociationMetric::Euclidean => index
                    .nearest(sp)
                    .filter(|&(_, d2)| d2 <= cfg.assoc_dist * cfg.assoc_dist),
                AssociationMetric::Mahalanobis { gate } => index
                    .within(sp, cfg.assoc_dist)
                    .into_iter()
                    .filter_map(|(mi, d2)| {
                        let diff = sp - map.points[mi].position;
                        let s = scan.per_point_cov[si] + map.points[mi].covariance;
                        let m2 = s.try_inverse().map(|inv| diff.dot(&(inv * diff)))?;
                        (m2 <= gate).then_some((mi, m2, d2))
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(mi, _, d2)| (mi, d2)),
            };
            if let Some((mi, d2)) = hit {
                scan_matched[si] = true;
                match chosen[mi] {
                    Some((_, best)) if best <= d2 => {}
                    _ => chosen[mi] = Some((si, d2)),
                }
            }
        }
    }

    let mut points = Vec::with_capacity(map.points.len() + scan.points.len() / 4);
    for (mp, ch) in map.points.iter().zip(&chosen) {
        let mut mp = mp.clone();
        // 2) reset the observing error
        if let Some((si, _)) = ch {
            mp.covariance = scan.per_point_cov[*si];
            stats.associated += 1;
        }
        // 3) eliminate uncertain points
        if mp.covariance.trace() > cfg.elimination_threshold {
            stats.eliminated += 1;
            continue;
        }
        points.push(mp);
    }

    // 4) append what was not associated
    let fresh: Vec<usize> = (0..scan.points.len()).filter(|&i| !scan_matched[i]).collect();
    let fresh_pos: Vec<Vector3<f64>> = fresh.iter().map(|&i| scan.points[i]).collect();
    for k in spacing_filter(&fresh_pos, cfg.insert_spacing) {
        let si = fresh[k];
        points.push(MapPoint {
            position: scan.points[si],
            covariance: scan.per_point_cov[si],
            birth_frame: map.frame_id,
        });
        stats.appended += 1;
    }
    (
        SlidingMap {
            points,
            frame_id: map.frame_id,
        },
        stats,
    )
}

/// Range-based baseline: drop points beyond `cutoff` and append scan points
/// with no map point within `assoc_dist`, thinned by the same spacing filter
/// as the observation-based method. Covariances play no role.
pub fn maintain_range_based(map: &SlidingMap, scan: &Scan, cutoff: f64, cfg: &MaintenanceConfig) -> SlidingMap {
    let mut points: Vec<MapPoint> = map
        .points
        .iter()
        .filter(|p| p.position.norm() <= cutoff)
        .cloned()
        .collect();
    let fresh: Vec<usize> = if points.is_empty() {
        (0..scan.points.len()).collect()
    } else {
        let index = PointIndex::new(points.iter().map(|p| p.position));
        let r2 = cfg.assoc_dist * cfg.assoc_dist;
        (0..scan.points.len())
            .filter(|&i| index.nearest(&scan.points[i]).is_none_or(|(_, d2)| d2 > r2))
            .collect()
    };
    let fresh_pos: Vec<Vector3<f64>> = fresh.iter().map(|&i| scan.points[i]).collect();
    for k in spacing_filter(&fresh_pos, cfg.insert_spacing) {
        let si = fresh[k];
        points.push(MapPoint {
            position: scan.points[si],
            covariance: scan.per_point_cov[si],
            birth_frame: map.frame_id,
        });
    }
    SlidingMap {
        points,
        frame_id: map.frame_id,
    }
}
