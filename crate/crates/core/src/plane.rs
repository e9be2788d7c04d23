//! Infinite planes in closest-point (CP) and Hesse form.
//!
//! A CP plane is the 3-vector `d·n`: the point of the plane nearest the frame
//! origin. It is minimal but singular for planes through the origin, so every
//! constructor enforces `|cp| >= CP_MIN_NORM`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::se3::Pose;

/// Smallest admissible distance between a plane and the frame origin (m).
pub const CP_MIN_NORM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneCP {
    cp: Vector3<f64>,
}

/// Hesse form `normalᵀ x = dist`, canonicalized so that `dist >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneHF {
    pub normal: Vector3<f64>,
    pub dist: f64,
}

impl PlaneCP {
    pub fn new(cp: Vector3<f64>) -> Result<Self> {
        let norm = cp.norm();
        if !(norm >= CP_MIN_NORM) {
            return Err(Error::SingularPlane { norm });
        }
        Ok(Self { cp })
    }

    pub fn vector(&self) -> &Vector3<f64> {
        &self.cp
    }

    pub fn dist(&self) -> f64 {
        self.cp.norm()
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.cp / self.cp.norm()
    }

    pub fn to_hf(&self) -> PlaneHF {
        cp_to_hf(self)
    }

    /// Signed distance of `p` from the plane, positive on the far side from the origin.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        let d = self.cp.norm();
        p.dot(&self.cp) / d - d
    }
}

impl PlaneHF {
    /// Normalizes `normal` and flips the sign so that `dist >= 0`.
    pub fn new(normal: Vector3<f64>, dist: f64) -> Result<Self> {
        let n = normal.norm();
        if !(n > 0.0) {
            return Err(Error::InvalidInput("zero plane normal".into()));
        }
        let (normal, dist) = (normal / n, dist / n);
        Ok(if dist < 0.0 {
            Self { normal: -normal, dist: -dist }
        } else {
            Self { normal, dist }
        })
    }

    pub fn to_cp(&self) -> Result<PlaneCP> {
        hf_to_cp(self)
    }
}

pub fn cp_to_hf(p: &PlaneCP) -> PlaneHF {
    let d = p.cp.norm();
    PlaneHF {
        normal: p.cp / d,
        dist: d,
    }
}

pub fn hf_to_cp(h: &PlaneHF) -> Result<PlaneCP> {
    PlaneCP::new(h.normal * h.dist)
}

/// Re-expresses `plane` (given in frame `a`) in frame `b`, where `t_b_a`
/// maps frame-`b` points into frame `a`: `p_a = R p_b + t`. Then
/// `n_b = Rᵀ n_a`, `d_b = d_a − n_aᵀ t` and `Π_b = d_b n_b`.
///
/// Example: `Π_a = (0, 0, −1.5)` with `t = (0, 0, 1)` gives `Π_b = (0, 0, −2.5)`.
pub fn transform_plane(plane: &PlaneCP, t_b_a: &Pose) -> Result<PlaneCP> {
    PlaneCP::new(transform_cp_unchecked(&plane.cp, t_b_a))
}

pub(crate) fn transform_cp_unchecked(cp: &Vector3<f64>, t_b_a: &Pose) -> Vector3<f64> {
    let d = cp.norm();
    let n = cp / d;
    let d_b = d - n.dot(&t_b_a.translation);
    t_b_a.rotation.transpose() * n * d_b
}

/// `∂ transform_plane(Π, T) / ∂Π`:
/// `Rᵀ − (RᵀΠ tᵀ + Πᵀt Rᵀ)/|Π|² + 2 Πᵀt RᵀΠΠᵀ/|Π|⁴`.
pub fn transform_plane_jacobian(plane: &PlaneCP, t_b_a: &Pose) -> Result<Matrix3<f64>> {
    let out = transform_cp_unchecked(&plane.cp, t_b_a);
    let norm = out.norm();
    if !(norm >= CP_MIN_NORM) {
        return Err(Error::SingularPlane { norm });
    }
    let pi = plane.cp;
    let t = t_b_a.translation;
    let rt = t_b_a.rotation.transpose();
    let n2 = pi.norm_squared();
    let pt = pi.dot(&t);
    Ok(rt - (rt * pi * t.transpose() + rt * pt) / n2 + rt * pi * pi.transpose() * (2.0 * pt / (n2 * n2)))
}
