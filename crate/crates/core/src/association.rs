//! Local ground correspondence between consecutive key-frames.
//!
//! The later key-frame's plane is carried into the earlier frame and compared
//! there; the relative-pose uncertainty is neglected, so the innovation
//! covariance is the sum of the two (propagated) plane covariances.

use nalgebra::{Cholesky, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::ground::GroundObservation;
use crate::plane::{transform_plane, transform_plane_jacobian};
use crate::se3::Pose;

/// 0.95 quantile of the chi-square distribution with 3 degrees of freedom.
pub const CHI2_3DOF_95: f64 = 7.815;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneInnovation {
    pub delta: Vector3<f64>,
    pub information: Matrix3<f64>,
    pub mahalanobis: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Association {
    SamePlane(usize),
    NewPlane,
}

/// `delta = Π_i − f(Π_{i+1}, T_i_i1)` where `t_i_i1` maps frame-`i` points
/// into frame `i+1`. `pose_noise_var`, when positive, inflates the innovation
/// covariance isotropically to account for relative-pose error.
pub fn plane_innovation(
    obs_i: &GroundObservation,
    obs_i1: &GroundObservation,
    t_i_i1: &Pose,
    pose_noise_var: f64,
) -> Result<PlaneInnovation> {
    let carried = transform_plane(&obs_i1.plane, t_i_i1)?;
    let j = transform_plane_jacobian(&obs_i1.plane, t_i_i1)?;
    let delta = obs_i.plane.vector() - carried.vector();
    let cov = obs_i.covariance + j * obs_i1.covariance * j.transpose() + Matrix3::identity() * pose_noise_var;
    let cov = (cov + cov.transpose()) * 0.5;
    let chol = Cholesky::new(cov).ok_or(Error::NonInvertibleCovariance)?;
    let information = chol.inverse();
    let mahalanobis = delta.dot(&chol.solve(&delta)).max(0.0);
    Ok(PlaneInnovation {
        delta,
        information,
        mahalanobis,
    })
}

/// `SamePlane` iff a previous landmark exists and `mahalanobis <= gate`.
pub fn associate_or_spawn(prev_landmark: Option<usize>, innovation: &PlaneInnovation, gate: f64) -> Association {
    match prev_landmark {
        Some(id) if innovation.mahalanobis <= gate => Association::SamePlane(id),
        _ => Association::NewPlane,
    }
}
