//! Rigid-body transforms and small-rotation calculus.
//!
//! Rotations are kept as 3×3 matrices; quaternions only appear at the TUM
//! trajectory boundary. Increments are applied on the left in the frame the
//! pose maps into: `R' = exp(w) R`, `t' = exp(w) t + v`, with the 6-vector
//! ordered `(w, v)`.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Matrix3, Matrix6, Quaternion, Rotation3, UnitQuaternion, Vector3, Vector6};

use crate::error::{Error, Result};

/// Orthonormality error above which a composed rotation is re-projected onto SO(3).
const REORTHO_TOLERANCE: f64 = 1e-10;
const SMALL_ANGLE: f64 = 1e-6;

/// Rigid transform mapping points of a source frame into a target frame:
/// `p_target = rotation * p_source + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, re-projecting `rotation` onto SO(3) if it has drifted.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: orthonormalize_if_needed(rotation),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation from a rotation vector (axis × angle) and a translation.
    pub fn from_parts(rotvec: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: so3_exp(&rotvec),
            translation,
        }
    }

    /// Intrinsic Z-Y-X (yaw, pitch, roll) construction.
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64, translation: Vector3<f64>) -> Self {
        let r = Rotation3::from_euler_angles(roll, pitch, yaw);
        Self {
            rotation: *r.matrix(),
            translation,
        }
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Left increment `(w, v)`: `R' = exp(w) R`, `t' = exp(w) t + v`.
    pub fn retract_left(&self, delta: &Vector6<f64>) -> Pose {
        let w = Vector3::new(delta[0], delta[1], delta[2]);
        let v = Vector3::new(delta[3], delta[4], delta[5]);
        let dr = so3_exp(&w);
        Pose::new(dr * self.rotation, dr * self.translation + v)
    }

    /// Split increment `(w, v)`: `R' = exp(w) R`, `t' = t + v`. Rotating a far
    /// pose does not swing its position about the origin, which keeps pose
    /// graph steps close to linear.
    pub fn retract_split(&self, delta: &Vector6<f64>) -> Pose {
        let w = Vector3::new(delta[0], delta[1], delta[2]);
        let v = Vector3::new(delta[3], delta[4], delta[5]);
        Pose::new(so3_exp(&w) * self.rotation, self.translation + v)
    }

    /// Inverse of [`Pose::retract_left`]: the increment taking `reference` to `self`.
    pub fn local_left(&self, reference: &Pose) -> Vector6<f64> {
        let dr = self.rotation * reference.rotation.transpose();
        let w = so3_log(&dr);
        let v = self.translation - dr * reference.translation;
        Vector6::new(w[0], w[1], w[2], v[0], v[1], v[2])
    }

    /// Adjoint for the `(w, v)` left-increment convention:
    /// `self ∘ exp(d) ∘ self⁻¹ = exp(adjoint · d)` to first order.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let mut ad = Matrix6::zeros();
        let r = self.rotation;
        let tr = skew(&self.translation) * r;
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&tr);
        ad
    }

    pub fn rotation_angle(&self) -> f64 {
        so3_log(&self.rotation).norm()
    }

    /// Roll, pitch, yaw (intrinsic Z-Y-X).
    pub fn euler_angles(&self) -> (f64, f64, f64) {
        Rotation3::from_matrix_unchecked(self.rotation).euler_angles()
    }

    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    /// From a quaternion given as `(x, y, z, w)`; normalized on the way in.
    pub fn from_quaternion(q: [f64; 4], translation: Vector3<f64>) -> Result<Pose> {
        let raw = Quaternion::new(q[3], q[0], q[1], q[2]);
        if !(raw.norm() > 1e-12) {
            return Err(Error::InvalidInput("zero-norm quaternion".into()));
        }
        let uq = UnitQuaternion::from_quaternion(raw);
        Ok(Pose::new(*uq.to_rotation_matrix().matrix(), translation))
    }

    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }
}

fn orthonormalize_if_needed(r: Matrix3<f64>) -> Matrix3<f64> {
    if (r.transpose() * r - Matrix3::identity()).norm() > REORTHO_TOLERANCE {
        orthonormalize(&r)
    } else {
        r
    }
}

/// Nearest rotation in the Frobenius sense (polar decomposition).
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut out = u * vt;
    if out.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        out = u2 * vt;
    }
    out
}

/// `skew(v) * u == v.cross(u)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula, with a series expansion for tiny angles.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(w);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let vee = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < SMALL_ANGLE {
        return vee * (0.5 * (1.0 + theta * theta / 6.0));
    }
    if std::f64::consts::PI - theta < 1e-3 {
        // Near pi the antisymmetric part vanishes; recover the axis from
        // the symmetric part instead, a a^T = (R - cos I) / (1 - cos).
        let s = (r - Matrix3::identity() * cos_theta) / (1.0 - cos_theta);
        let col = (0..3)
            .max_by(|&i, &j| s[(i, i)].total_cmp(&s[(j, j)]))
            .unwrap();
        let mut axis: Vector3<f64> = s.column(col).into();
        axis /= axis.norm();
        if axis.dot(&vee) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    vee * (theta / (2.0 * theta.sin()))
}

/// Two-block pose uncertainty: rotation (left so(3) increment) and translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseCovariance {
    pub rot_cov: Matrix3<f64>,
    pub trans_cov: Matrix3<f64>,
}

impl Default for PoseCovariance {
    fn default() -> Self {
        Self::zero()
    }
}

impl PoseCovariance {
    pub fn zero() -> Self {
        Self {
            rot_cov: Matrix3::zeros(),
            trans_cov: Matrix3::zeros(),
        }
    }

    pub fn isotropic(rot_sigma: f64, trans_sigma: f64) -> Self {
        Self {
            rot_cov: Matrix3::identity() * rot_sigma.powi(2),
            trans_cov: Matrix3::identity() * trans_sigma.powi(2),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.rot_cov.iter().all(|&x| x == 0.0) && self.trans_cov.iter().all(|&x| x == 0.0)
    }

    pub fn trace(&self) -> f64 {
        self.rot_cov.trace() + self.trans_cov.trace()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            rot_cov: self.rot_cov * k,
            trans_cov: self.trans_cov * k,
        }
    }

    pub fn add(&self, other: &PoseCovariance) -> Self {
        Self {
            rot_cov: self.rot_cov + other.rot_cov,
            trans_cov: self.trans_cov + other.trans_cov,
        }
    }

    /// Block-diagonal 6×6 in `(w, v)` order.
    pub fn to_matrix6(&self) -> Matrix6<f64> {
        let mut m = Matrix6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rot_cov);
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.trans_cov);
        m
    }

    /// Diagonal blocks of a 6×6 `(w, v)` covariance; cross terms are dropped.
    pub fn from_matrix6(m: &Matrix6<f64>) -> Self {
        let sym = (m + m.transpose()) * 0.5;
        Self {
            rot_cov: sym.fixed_view::<3, 3>(0, 0).into(),
            trans_cov: sym.fixed_view::<3, 3>(3, 3).into(),
        }
    }

    /// Given this covariance of `pose` under [`Pose::retract_left`], the
    /// covariance of `pose⁻¹ = (R, t)` perturbed as `(exp(w) R, t + v)`, the
    /// form used when re-centering map points. To first order
    /// `w = -Rᵀ w_pose` and `v = -Rᵀ v_pose`, so the blocks stay separate.
    pub fn for_inverse(&self, pose: &Pose) -> Self {
        let rt = pose.rotation.transpose();
        Self {
            rot_cov: rt * self.rot_cov * pose.rotation,
            trans_cov: rt * self.trans_cov * pose.rotation,
        }
    }
}

/// A timestamped pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose {
    pub timestamp: f64,
    pub pose: Pose,
}

pub type Trajectory = Vec<StampedPose>;

/// Expresses every pose relative to the first one.
pub fn rebase_to_first(traj: &[StampedPose]) -> Trajectory {
    let Some(first) = traj.first() else {
        return Vec::new();
    };
    let inv = first.pose.inverse();
    traj.iter()
        .map(|s| StampedPose {
            timestamp: s.timestamp,
            pose: inv.compose(&s.pose),
        })
        .collect()
}

/// Parses `timestamp tx ty tz qx qy qz qw` lines; `#` starts a comment.
pub fn read_tum<R: BufRead>(reader: R) -> Result<Trajectory> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let vals: Vec<f64> = content
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|e| Error::Parse {
                    line: idx + 1,
                    msg: format!("`{tok}`: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != 8 {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("expected 8 fields, found {}", vals.len()),
            });
        }
        let pose = Pose::from_quaternion(
            [vals[4], vals[5], vals[6], vals[7]],
            Vector3::new(vals[1], vals[2], vals[3]),
        )
        .map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        out.push(StampedPose {
            timestamp: vals[0],
            pose,
        });
    }
    Ok(out)
}

pub fn format_tum(traj: &[StampedPose]) -> String {
    let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for sp in traj {
        let q = sp.pose.to_quaternion();
        let t = sp.pose.translation;
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {}",
            sp.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        );
    }
    s
}

pub fn write_tum<W: Write>(mut writer: W, traj: &[StampedPose]) -> Result<()> {
    writer.write_all(format_tum(traj).as_bytes())?;
    Ok(())
}

pub fn load_tum(path: &Path) -> Result<Trajectory> {
    let f = std::fs::File::open(path)?;
    read_tum(std::io::BufReader::new(f))
}

pub fn save_tum(path: &Path, traj: &[StampedPose]) -> Result<()> {
    std::fs::write(path, format_tum(traj))?;
    Ok(())
}
