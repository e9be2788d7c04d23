//! Pose graph over key-frame poses and CP ground landmarks, solved with
//! Levenberg-Marquardt.
//!
//! Pose nodes hold `T_j^w` (sensor to world). Relative factors measure
//! `Z = T_i⁻¹ T_j` with information expressed under a left perturbation in
//! frame `i`. Ground factors tie a pose to a world plane landmark through the
//! observed plane carried into the world frame.
//!
//! The solver steps poses with [`Pose::retract_split`] and planes additively.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Matrix3, Matrix3x6, Matrix6, SymmetricEigen, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::ground::GroundObservation;
use crate::keyframe::KeyFrame;
use crate::plane::{transform_plane, transform_plane_jacobian, PlaneCP, CP_MIN_NORM};
use crate::registration::{register_point_to_plane, RegistrationConfig, Scan};
use crate::se3::{skew, so3_log, Pose};
use crate::spatial::voxel_filter;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseNode {
    pub id: usize,
    pub pose: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneNode {
    pub id: usize,
    /// Landmark in the world frame.
    pub plane: PlaneCP,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FactorKind {
    Odometry,
    PlaneObservation,
    LoopClosure,
}

impl FactorKind {
    fn tag(self) -> &'static str {
        match self {
            FactorKind::Odometry => "ODOMETRY",
            FactorKind::PlaneObservation => "PLANE_OBSERVATION",
            FactorKind::LoopClosure => "LOOP_CLOSURE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Measurement {
    /// `T_i⁻¹ T_j`.
    Relative(Pose),
    /// Ground plane seen from the pose node.
    Ground(GroundObservation),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub kind: FactorKind,
    /// `[i, j]` pose ids for relative factors, `[pose, plane]` for ground ones.
    pub node_ids: [usize; 2],
    pub measurement: Measurement,
    /// 6×6 for relative factors (`(w, v)` order), 3×3 for ground factors.
    pub information: DMatrix<f64>,
}

impl Factor {
    pub fn odometry(i: usize, j: usize, z: Pose, information: Matrix6<f64>) -> Self {
        Self::relative(FactorKind::Odometry, i, j, z, information)
    }

    pub fn loop_closure(i: usize, j: usize, z: Pose, information: Matrix6<f64>) -> Self {
        Self::relative(FactorKind::LoopClosure, i, j, z, information)
    }

    fn relative(kind: FactorKind, i: usize, j: usize, z: Pose, information: Matrix6<f64>) -> Self {
        Self {
            kind,
            node_ids: [i, j],
            measurement: Measurement::Relative(z),
            information: DMatrix::from_iterator(6, 6, information.iter().copied()),
        }
    }

    /// Ground factor whose information is the observation covariance carried
    /// into the world frame through the current pose estimate.
    pub fn plane_observation(pose_id: usize, plane_id: usize, obs: GroundObservation, pose: &Pose) -> Result<Self> {
        let j = transform_plane_jacobian(&obs.plane, &pose.inverse())?;
        let cov = j * obs.covariance * j.transpose();
        let cov = (cov + cov.transpose()) * 0.5;
        let info = Cholesky::new(cov).ok_or(Error::NonInvertibleCovariance)?.inverse();
        let info = (info + info.transpose()) * 0.5;
        Ok(Self::plane_observation_with_information(pose_id, plane_id, obs, info))
    }

    pub fn plane_observation_with_information(
        pose_id: usize,
        plane_id: usize,
        obs: GroundObservation,
        information: Matrix3<f64>,
    ) -> Self {
        Self {
            kind: FactorKind::PlaneObservation,
            node_ids: [pose_id, plane_id],
            measurement: Measurement::Ground(obs),
            information: DMatrix::from_iterator(3, 3, information.iter().copied()),
        }
    }
}

/// World-frame landmark implied by observing `obs` from `pose`.
pub fn plane_in_world(obs: &GroundObservation, pose: &Pose) -> Result<PlaneCP> {
    transform_plane(&obs.plane, &pose.inverse())
}

/// Node ids equal their position in `poses` / `planes`. Pose 0 is the gauge.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoseGraph {
    pub poses: Vec<PoseNode>,
    pub planes: Vec<PlaneNode>,
    pub factors: Vec<Factor>,
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_pose(&mut self, pose: Pose) -> usize {
        let id = self.poses.len();
        self.poses.push(PoseNode { id, pose });
        id
    }

    pub fn add_plane(&mut self, plane: PlaneCP) -> usize {
        let id = self.planes.len();
        self.planes.push(PlaneNode { id, plane });
        id
    }

    pub fn add_factor(&mut self, factor: Factor) -> Result<()> {
        let [a, b] = factor.node_ids;
        let (dim, b_ok) = match (&factor.kind, &factor.measurement) {
            (FactorKind::PlaneObservation, Measurement::Ground(_)) => (3, b < self.planes.len()),
            (FactorKind::Odometry | FactorKind::LoopClosure, Measurement::Relative(_)) => (6, b < self.poses.len()),
            _ => return Err(Error::InvalidInput("factor kind does not match its measurement".into())),
        };
        if a >= self.poses.len() || !b_ok {
            return Err(Error::InvalidInput(format!("factor references unknown node ({a}, {b})")));
        }
        check_information(&factor.information, dim)?;
        self.factors.push(factor);
        Ok(())
    }

    pub fn count(&self, kind: FactorKind) -> usize {
        self.factors.iter().filter(|f| f.kind == kind).count()
    }

    /// Objective with the default robust-kernel width.
    pub fn cost(&self) -> Result<f64> {
        total_cost(self, LmConfig::default().huber_delta)
    }
}

fn check_information(info: &DMatrix<f64>, dim: usize) -> Result<()> {
    if info.nrows() != dim || info.ncols() != dim {
        return Err(Error::InvalidInput(format!("information must be {dim}x{dim}")));
    }
    if info.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("information has non-finite entries".into()));
    }
    let scale = info.amax().max(f64::MIN_POSITIVE);
    if (info - info.transpose()).amax() > 1e-9 * scale {
        return Err(Error::InvalidInput("information is not symmetric".into()));
    }
    let eig = SymmetricEigen::new(info.clone()).eigenvalues;
    if eig.min() < -1e-9 * scale {
        return Err(Error::InvalidInput("information is not positive semi-definite".into()));
    }
    Ok(())
}

/// `e = (log R_E, t_E)` with `E = T_i⁻¹ T_j Z⁻¹`.
pub fn relative_residual(t_i: &Pose, t_j: &Pose, z: &Pose) -> Vector6<f64> {
    let e = t_i.inverse().compose(t_j).compose(&z.inverse());
    let w = so3_log(&e.rotation);
    Vector6::new(w.x, w.y, w.z, e.translation.x, e.translation.y, e.translation.z)
}

/// `r = Π^w − d·m − (mᵀt)·m` with `m = R ñ`, where `(ñ, d)` is the observation
/// in Hesse form and `(R, t)` the node pose.
pub fn plane_residual(plane: &PlaneCP, pose: &Pose, obs: &GroundObservation) -> Result<Vector3<f64>> {
    let (m, s) = predicted_world_plane(pose, obs)?;
    Ok(plane.vector() - m * s)
}

fn predicted_world_plane(pose: &Pose, obs: &GroundObservation) -> Result<(Vector3<f64>, f64)> {
    let hf = obs.plane.to_hf();
    let m = pose.rotation * hf.normal;
    let s = hf.dist + m.dot(&pose.translation);
    if s.abs() < CP_MIN_NORM {
        return Err(Error::SingularPlane { norm: s.abs() });
    }
    Ok((m, s))
}

/// Derivatives of [`plane_residual`] under `Π ← Π + δ`, `R ← exp(w) R` and
/// `t ← t + v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneJacobians {
    pub j_plane: Matrix3<f64>,
    pub j_rot: Matrix3<f64>,
    pub j_trans: Matrix3<f64>,
}

/// Closed-form Jacobians with the rotational block `d·m^`, which drops the
/// `(mᵀt)·m^` term and so is exact only at `t = 0`.
pub fn plane_factor_jacobians(plane: &PlaneCP, pose: &Pose, obs: &GroundObservation) -> Result<PlaneJacobians> {
    let _ = plane;
    let (m, _) = predicted_world_plane(pose, obs)?;
    Ok(PlaneJacobians {
        j_plane: Matrix3::identity(),
        j_rot: skew(&m) * obs.plane.dist(),
        j_trans: -(m * m.transpose()),
    })
}

/// Exact Jacobians under the same perturbation. Rotating `m` also moves the
/// offset `mᵀt`, so the rotation block is `(d + mᵀt)·m^ − m (m × t)ᵀ`.
pub fn plane_factor_jacobians_exact(plane: &PlaneCP, pose: &Pose, obs: &GroundObservation) -> Result<PlaneJacobians> {
    let _ = plane;
    let (m, s) = predicted_world_plane(pose, obs)?;
    Ok(PlaneJacobians {
        j_plane: Matrix3::identity(),
        j_rot: skew(&m) * s - m * m.cross(&pose.translation).transpose(),
        j_trans: -(m * m.transpose()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub initial_lambda: f64,
    pub lambda_factor: f64,
    pub max_lambda: f64,
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub relative_tolerance: f64,
    /// Huber width on loop-closure factors, in whitened units.
    pub huber_delta: f64,
    /// Smallest admissible eigenvalue ratio of the Jacobi-scaled normal matrix.
    pub rank_tolerance: f64,
    /// Whitened cost treated as an exact fit.
    pub absolute_tolerance: f64,
    /// Add the second-order correction along each step, which lets the
    /// solver follow curved valleys instead of zig-zagging down them.
    pub geodesic_acceleration: bool,
}

/// Largest admissible `2‖a‖ / ‖δ‖` (diag(H)-scaled) for an accelerated step.
const ACCELERATION_RATIO: f64 = 0.75;

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            initial_lambda: 1e-4,
            lambda_factor: 10.0,
            max_lambda: 1e12,
            max_iterations: 100,
            relative_tolerance: 1e-9,
            huber_delta: 1.0,
            rank_tolerance: 1e-12,
            absolute_tolerance: 1e-18,
            geodesic_acceleration: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    /// Linear solves attempted, accepted or not.
    pub iterations: usize,
    pub accepted_steps: usize,
    /// Cost before optimization followed by the cost after each accepted step.
    pub cost_history: Vec<f64>,
    pub converged: bool,
}

impl OptimizeReport {
    pub fn initial_cost(&self) -> f64 {
        self.cost_history[0]
    }

    pub fn final_cost(&self) -> f64 {
        *self.cost_history.last().unwrap()
    }
}

/// Squared whitened norm through the Huber kernel: `ρ(s²)` and the IRLS weight.
pub fn huber(s2: f64, delta: f64) -> (f64, f64) {
    if s2 <= delta * delta {
        (s2, 1.0)
    } else {
        let s = s2.sqrt();
        (2.0 * delta * s - delta * delta, delta / s)
    }
}

struct Layout {
    pose_offset: Vec<Option<usize>>,
    plane_offset: Vec<usize>,
    dim: usize,
}

impl Layout {
    fn new(graph: &PoseGraph) -> Self {
        let mut dim = 0;
        let pose_offset = (0..graph.poses.len())
            .map(|k| {
                (k > 0).then(|| {
                    dim += 6;
                    dim - 6
                })
            })
            .collect();
        let plane_offset = (0..graph.planes.len())
            .map(|_| {
                dim += 3;
                dim - 3
            })
            .collect();
        Self {
            pose_offset,
            plane_offset,
            dim,
        }
    }
}

fn factor_cost(graph: &PoseGraph, f: &Factor, delta: f64) -> Result<f64> {
    let [a, b] = f.node_ids;
    let (s2, robust) = match &f.measurement {
        Measurement::Relative(z) => {
            let r = DVector::from_column_slice(relative_residual(&graph.poses[a].pose, &graph.poses[b].pose, z).as_slice());
            (r.dot(&(&f.information * &r)), f.kind == FactorKind::LoopClosure)
        }
        Measurement::Ground(obs) => {
            let r = plane_residual(&graph.planes[b].plane, &graph.poses[a].pose, obs)?;
            let r = DVector::from_column_slice(r.as_slice());
            (r.dot(&(&f.information * &r)), false)
        }
    };
    Ok(if robust { huber(s2, delta).0 } else { s2 })
}

fn total_cost(graph: &PoseGraph, delta: f64) -> Result<f64> {
    graph.factors.iter().map(|f| factor_cost(graph, f, delta)).sum()
}

fn numeric_relative_jacobians(t_i: &Pose, t_j: &Pose, z: &Pose) -> (Matrix6<f64>, Matrix6<f64>) {
    const H: f64 = 1e-6;
    let mut ji = Matrix6::zeros();
    let mut jj = Matrix6::zeros();
    for k in 0..6 {
        let mut d = Vector6::zeros();
        d[k] = H;
        let plus = relative_residual(&t_i.retract_split(&d), t_j, z);
        let minus = relative_residual(&t_i.retract_split(&-d), t_j, z);
        ji.set_column(k, &((plus - minus) / (2.0 * H)));
        let plus = relative_residual(t_i, &t_j.retract_split(&d), z);
        let minus = relative_residual(t_i, &t_j.retract_split(&-d), z);
        jj.set_column(k, &((plus - minus) / (2.0 * H)));
    }
    (ji, jj)
}

/// Residual of one factor and its Jacobian blocks, each tagged with the
/// column offset of the node it belongs to (`None` for the fixed pose).
type Linearized = (DVector<f64>, Vec<(Option<usize>, DMatrix<f64>)>);

fn factor_residual(graph: &PoseGraph, f: &Factor) -> Result<DVector<f64>> {
    let [a, b] = f.node_ids;
    Ok(match &f.measurement {
        Measurement::Relative(z) => {
            DVector::from_column_slice(relative_residual(&graph.poses[a].pose, &graph.poses[b].pose, z).as_slice())
        }
        Measurement::Ground(obs) => {
            DVector::from_column_slice(plane_residual(&graph.planes[b].plane, &graph.poses[a].pose, obs)?.as_slice())
        }
    })
}

fn linearize_factor(graph: &PoseGraph, layout: &Layout, f: &Factor) -> Result<Linearized> {
    let [a, b] = f.node_ids;
    let r = factor_residual(graph, f)?;
    let blocks = match &f.measurement {
        Measurement::Relative(z) => {
            let (ji, jj) = numeric_relative_jacobians(&graph.poses[a].pose, &graph.poses[b].pose, z);
            vec![
                (layout.pose_offset[a], DMatrix::from_column_slice(6, 6, ji.as_slice())),
                (layout.pose_offset[b], DMatrix::from_column_slice(6, 6, jj.as_slice())),
            ]
        }
        Measurement::Ground(obs) => {
            let (pose, plane) = (&graph.poses[a].pose, &graph.planes[b].plane);
            let j = plane_factor_jacobians_exact(plane, pose, obs)?;
            let mut jp = Matrix3x6::zeros();
            jp.fixed_view_mut::<3, 3>(0, 0).copy_from(&j.j_rot);
            jp.fixed_view_mut::<3, 3>(0, 3).copy_from(&j.j_trans);
            vec![
                (layout.pose_offset[a], DMatrix::from_column_slice(3, 6, jp.as_slice())),
                (Some(layout.plane_offset[b]), DMatrix::from_column_slice(3, 3, j.j_plane.as_slice())),
            ]
        }
    };
    Ok((r, blocks))
}

fn robust_weight(f: &Factor, r: &DVector<f64>, delta: f64) -> f64 {
    if f.kind == FactorKind::LoopClosure {
        huber(r.dot(&(&f.information * r)), delta).1
    } else {
        1.0
    }
}

/// Gauss-Newton normal equations `H = Σ w JᵀΩJ`, `g = Σ w JᵀΩr`, plus the
/// per-factor linearizations for reuse.
fn linearize(graph: &PoseGraph, layout: &Layout, delta: f64) -> Result<(DMatrix<f64>, DVector<f64>, Vec<Linearized>)> {
    let mut h = DMatrix::zeros(layout.dim, layout.dim);
    let mut g = DVector::zeros(layout.dim);
    let mut all = Vec::with_capacity(graph.factors.len());
    for f in &graph.factors {
        let (r, blocks) = linearize_factor(graph, layout, f)?;
        let w = robust_weight(f, &r, delta);
        for (oa, ja) in &blocks {
            let Some(oa) = *oa else { continue };
            let jt_omega = ja.transpose() * &f.information * w;
            let mut gv = g.rows_mut(oa, ja.ncols());
            gv += &jt_omega * &r;
            for (ob, jb) in &blocks {
                let Some(ob) = *ob else { continue };
                let mut hv = h.view_mut((oa, ob), (ja.ncols(), jb.ncols()));
                hv += &jt_omega * jb;
            }
        }
        all.push((r, blocks));
    }
    Ok((h, g, all))
}

/// Right-hand side `Σ w JᵀΩ r_vv` of the geodesic acceleration, with the
/// second directional derivative `r_vv` along `step` taken by central
/// differences.
fn acceleration_rhs(
    graph: &PoseGraph,
    layout: &Layout,
    lin: &[Linearized],
    step: &DVector<f64>,
    delta: f64,
) -> Option<DVector<f64>> {
    const H: f64 = 0.1;
    let plus = apply_step(graph, layout, &(step * H))?;
    let minus = apply_step(graph, layout, &(step * -H))?;
    let mut rhs = DVector::zeros(layout.dim);
    for (f, (r, blocks)) in graph.factors.iter().zip(lin) {
        let rp = factor_residual(&plus, f).ok()?;
        let rm = factor_residual(&minus, f).ok()?;
        let rvv = (rp + rm - r * 2.0) / (H * H);
        let w = robust_weight(f, r, delta);
        let omega_rvv = &f.information * rvv * w;
        for (oa, ja) in blocks {
            let Some(oa) = *oa else { continue };
            let mut v = rhs.rows_mut(oa, ja.ncols());
            v += ja.transpose() * &omega_rvv;
        }
    }
    Some(rhs)
}

fn apply_step(graph: &PoseGraph, layout: &Layout, step: &DVector<f64>) -> Option<PoseGraph> {
    let mut out = graph.clone();
    for (node, off) in out.poses.iter_mut().zip(&layout.pose_offset) {
        if let Some(o) = *off {
            let d = Vector6::from_iterator(step.rows(o, 6).iter().copied());
            node.pose = node.pose.retract_split(&d);
        }
    }
    for (node, &o) in out.planes.iter_mut().zip(&layout.plane_offset) {
        node.plane = PlaneCP::new(node.plane.vector() + step.fixed_rows::<3>(o)).ok()?;
    }
    Some(out)
}

/// Smallest-to-largest eigenvalue ratio of `D^-½ H D^-½`, `D = diag(H)`.
fn scaled_eigen_ratio(h: &DMatrix<f64>) -> f64 {
    let d = h.diagonal();
    if d.iter().any(|&v| !(v > 0.0)) {
        return 0.0;
    }
    let s = d.map(|v| 1.0 / v.sqrt());
    let scaled = DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| h[(i, j)] * s[i] * s[j]);
    let eig = SymmetricEigen::new(scaled).eigenvalues;
    let max = eig.max();
    if max > 0.0 {
        eig.min() / max
    } else {
        0.0
    }
}

/// Minimizes `Σ rᵀΩr` (Huber-weighted on loop closures) over all poses but
/// the first and all plane landmarks.
pub fn optimize(graph: &PoseGraph, cfg: &LmConfig) -> Result<(PoseGraph, OptimizeReport)> {
    if graph.poses.is_empty() {
        return Err(Error::InvalidInput("pose graph has no poses".into()));
    }
    let layout = Layout::new(graph);
    let mut current = graph.clone();
    let mut cost = total_cost(&current, cfg.huber_delta)?;
    let mut report = OptimizeReport {
        iterations: 0,
        accepted_steps: 0,
        cost_history: vec![cost],
        converged: false,
    };
    if layout.dim == 0 {
        report.converged = true;
        return Ok((current, report));
    }
    let (mut h, mut g, mut lin) = linearize(&current, &layout, cfg.huber_delta)?;
    let ratio = scaled_eigen_ratio(&h);
    if ratio < cfg.rank_tolerance {
        return Err(Error::RankDeficient { ratio });
    }
    let mut lambda = cfg.initial_lambda;
    while report.iterations < cfg.max_iterations {
        if cost <= cfg.absolute_tolerance || g.amax() == 0.0 {
            report.converged = true;
            break;
        }
        report.iterations += 1;
        let mut damped = h.clone();
        for i in 0..layout.dim {
            damped[(i, i)] += lambda * h[(i, i)];
        }
        let candidate = Cholesky::new(damped).and_then(|chol| {
            let mut step = chol.solve(&-&g);
            if cfg.geodesic_acceleration {
                let rhs = acceleration_rhs(&current, &layout, &lin, &step, cfg.huber_delta)?;
                let accel = chol.solve(&-rhs);
                let scaled = |v: &DVector<f64>| v.iter().zip(h.diagonal().iter()).map(|(x, d)| x * x * d).sum::<f64>().sqrt();
                if 2.0 * scaled(&accel) > ACCELERATION_RATIO * scaled(&step) {
                    return None;
                }
                step += accel * 0.5;
            }
            apply_step(&current, &layout, &step)
        });
        let new_cost = candidate
            .as_ref()
            .and_then(|c| total_cost(c, cfg.huber_delta).ok())
            .filter(|c| c.is_finite());
        log::trace!("lm {}: lambda {lambda:.1e}, cost {cost:.9e} -> {new_cost:?}", report.iterations);
        match (candidate, new_cost) {
            (Some(next), Some(nc)) if nc < cost => {
                let decrease = (cost - nc) / cost;
                current = next;
                cost = nc;
                report.accepted_steps += 1;
                report.cost_history.push(cost);
                lambda = (lambda / cfg.lambda_factor).max(1e-15);
                if decrease < cfg.relative_tolerance {
                    report.converged = true;
                    break;
                }
                (h, g, lin) = linearize(&current, &layout, cfg.huber_delta)?;
            }
            _ => {
                lambda *= cfg.lambda_factor;
                if lambda > cfg.max_lambda {
                    // no descent direction left at this precision
                    report.converged = true;
                    break;
                }
            }
        }
    }
    Ok((current, report))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopClosureConfig {
    pub radius: f64,
    pub min_gap: usize,
    pub max_rms: f64,
    pub min_inlier_fraction: f64,
    /// Voxel size used to thin the source local map before registration.
    pub source_voxel: f64,
    /// Correspondence gate of the fine pass that follows the coarse one.
    pub refine_corr_dist: f64,
    pub registration: RegistrationConfig,
}

impl Default for LoopClosureConfig {
    fn default() -> Self {
        Self {
            radius: 5.0,
            min_gap: 20,
            max_rms: 0.1,
            min_inlier_fraction: 0.5,
            source_voxel: 0.5,
            refine_corr_dist: 1.0,
            registration: RegistrationConfig {
                max_corr_dist: 2.0,
                ..RegistrationConfig::default()
            },
        }
    }
}

/// Outcome of verifying one candidate pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopCandidate {
    pub i: usize,
    pub j: usize,
    pub accepted: bool,
    pub rms_residual: f64,
    pub inlier_fraction: f64,
}

/// Proximity candidates verified by registering local maps. For each later
/// key-frame only its closest admissible earlier key-frame is tried.
pub fn detect_loop_closures(keyframes: &[KeyFrame], estimate: &[Pose], cfg: &LoopClosureConfig) -> Vec<Factor> {
    detect_loop_closures_verbose(keyframes, estimate, cfg).0
}

pub fn detect_loop_closures_verbose(
    keyframes: &[KeyFrame],
    estimate: &[Pose],
    cfg: &LoopClosureConfig,
) -> (Vec<Factor>, Vec<LoopCandidate>) {
    let mut factors = Vec::new();
    let mut tried = Vec::new();
    let n = keyframes.len().min(estimate.len());
    for j in 0..n {
        let best = (0..j)
            .filter(|&i| j - i > cfg.min_gap)
            .map(|i| (i, (estimate[i].translation - estimate[j].translation).norm()))
            .filter(|&(_, d)| d < cfg.radius)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        let Some((i, _)) = best else { continue };
        let guess = estimate[i].inverse().compose(&estimate[j]);
        let source = map_as_scan(&keyframes[j], cfg.source_voxel);
        let target = &keyframes[i].local_map;
        // coarse pass with a wide gate, then a fine pass from its result
        let outcome = register_point_to_plane(&source, target, &guess, &cfg.registration).and_then(|coarse| {
            let fine = RegistrationConfig {
                max_corr_dist: cfg.refine_corr_dist,
                ..cfg.registration
            };
            register_point_to_plane(&source, target, &coarse.transform, &fine)
        });
        let mut cand = LoopCandidate {
            i,
            j,
            accepted: false,
            rms_residual: f64::INFINITY,
            inlier_fraction: 0.0,
        };
        if let Ok(res) = outcome {
            cand.rms_residual = res.rms_residual;
            cand.inlier_fraction = res.inlier_fraction();
            let info = res.covariance.to_matrix6().try_inverse();
            if res.converged && res.rms_residual < cfg.max_rms && res.inlier_fraction() > cfg.min_inlier_fraction {
                if let Some(info) = info.filter(|m| m.iter().all(|v| v.is_finite())) {
                    cand.accepted = true;
                    factors.push(Factor::loop_closure(i, j, res.transform, (info + info.transpose()) * 0.5));
                }
            }
        }
        log::debug!(
            "loop candidate {i}-{j}: accepted={} rms={:.4} inliers={:.3}",
            cand.accepted,
            cand.rms_residual,
            cand.inlier_fraction
        );
        tried.push(cand);
    }
    (factors, tried)
}

fn map_as_scan(kf: &KeyFrame, voxel: f64) -> Scan {
    let positions: Vec<Vector3<f64>> = kf.local_map.positions().collect();
    let keep = voxel_filter(&positions, voxel);
    Scan {
        points: keep.iter().map(|&k| positions[k]).collect(),
        per_point_cov: keep.iter().map(|&k| kf.local_map.points[k].covariance).collect(),
        timestamp: kf.timestamp,
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_pose_fields(out: &mut Vec<String>, pose: &Pose) {
    let q = pose.to_quaternion();
    for v in pose.translation.iter().chain([q.i, q.j, q.k, q.w].iter()) {
        out.push(fmt(*v));
    }
}

fn write_upper<const D: usize>(out: &mut Vec<String>, m: &DMatrix<f64>) {
    for r in 0..D {
        for c in r..D {
            out.push(fmt(m[(r, c)]));
        }
    }
}

/// One element per line: `POSE`, `PLANE`, then `FACTOR` lines.
pub fn write_graph<W: Write>(mut w: W, graph: &PoseGraph) -> Result<()> {
    for node in &graph.poses {
        let mut f = vec!["POSE".to_string(), node.id.to_string()];
        write_pose_fields(&mut f, &node.pose);
        writeln!(w, "{}", f.join(" "))?;
    }
    for node in &graph.planes {
        let p = node.plane.vector();
        writeln!(w, "PLANE {} {} {} {}", node.id, fmt(p.x), fmt(p.y), fmt(p.z))?;
    }
    for factor in &graph.factors {
        let [a, b] = factor.node_ids;
        let mut f = vec!["FACTOR".to_string(), factor.kind.tag().to_string(), a.to_string(), b.to_string()];
        match &factor.measurement {
            Measurement::Relative(z) => {
                write_pose_fields(&mut f, z);
                write_upper::<6>(&mut f, &factor.information);
            }
            Measurement::Ground(obs) => {
                f.extend(obs.plane.vector().iter().map(|v| fmt(*v)));
                let cov = DMatrix::from_column_slice(3, 3, obs.covariance.as_slice());
                write_upper::<3>(&mut f, &cov);
                f.push(obs.support_count.to_string());
                f.push(fmt(obs.mean_residual));
                write_upper::<3>(&mut f, &factor.information);
            }
        }
        writeln!(w, "{}", f.join(" "))?;
    }
    Ok(())
}

pub fn save_graph(path: &Path, graph: &PoseGraph) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_graph(&mut w, graph)?;
    w.flush()?;
    Ok(())
}

pub fn load_graph(path: &Path) -> Result<PoseGraph> {
    read_graph(BufReader::new(std::fs::File::open(path)?))
}

fn symmetric_from_upper(vals: &[f64], dim: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(dim, dim);
    let mut k = 0;
    for r in 0..dim {
        for c in r..dim {
            m[(r, c)] = vals[k];
            m[(c, r)] = vals[k];
            k += 1;
        }
    }
    m
}

pub fn read_graph<R: BufRead>(reader: R) -> Result<PoseGraph> {
    let mut graph = PoseGraph::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let perr = |msg: String| Error::Parse { line: lineno, msg };
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() || toks[0].starts_with('#') {
            continue;
        }
        let id = |s: &str| s.parse::<usize>().map_err(|e| perr(format!("bad id `{s}`: {e}")));
        let nums = |s: &[&str]| -> Result<Vec<f64>> {
            s.iter()
                .map(|t| t.parse::<f64>().map_err(|e| perr(format!("bad number `{t}`: {e}"))))
                .collect()
        };
        let expect = |n: usize| {
            if toks.len() == n {
                Ok(())
            } else {
                Err(perr(format!("expected {n} fields, found {}", toks.len())))
            }
        };
        let pose_of = |v: &[f64]| Pose::from_quaternion([v[3], v[4], v[5], v[6]], Vector3::new(v[0], v[1], v[2]));
        match toks[0] {
            "POSE" => {
                expect(9)?;
                let i = id(toks[1])?;
                if i != graph.poses.len() {
                    return Err(perr(format!("pose ids must be consecutive, got {i}")));
                }
                let v = nums(&toks[2..])?;
                graph.add_pose(pose_of(&v)?);
            }
            "PLANE" => {
                expect(5)?;
                let i = id(toks[1])?;
                if i != graph.planes.len() {
                    return Err(perr(format!("plane ids must be consecutive, got {i}")));
                }
                let v = nums(&toks[2..])?;
                graph.add_plane(PlaneCP::new(Vector3::new(v[0], v[1], v[2]))?);
            }
            "FACTOR" if toks.len() >= 4 => {
                let (a, b) = (id(toks[2])?, id(toks[3])?);
                let factor = match toks[1] {
                    "ODOMETRY" | "LOOP_CLOSURE" => {
                        expect(4 + 7 + 21)?;
                        let v = nums(&toks[4..])?;
                        let info = symmetric_from_upper(&v[7..], 6);
                        Factor {
                            kind: if toks[1] == "ODOMETRY" {
                                FactorKind::Odometry
                            } else {
                                FactorKind::LoopClosure
                            },
                            node_ids: [a, b],
                            measurement: Measurement::Relative(pose_of(&v)?),
                            information: info,
                        }
                    }
                    "PLANE_OBSERVATION" => {
                        expect(4 + 3 + 6 + 2 + 6)?;
                        let support = id(toks[13])?;
                        let mut v = nums(&toks[4..13])?;
                        v.extend(nums(&toks[14..])?);
                        let cov = symmetric_from_upper(&v[3..9], 3);
                        let obs = GroundObservation {
                            plane: PlaneCP::new(Vector3::new(v[0], v[1], v[2]))?,
                            covariance: Matrix3::from_iterator(cov.iter().copied()),
                            support_count: support,
                            mean_residual: v[9],
                        };
                        Factor {
                            kind: FactorKind::PlaneObservation,
                            node_ids: [a, b],
                            measurement: Measurement::Ground(obs),
                            information: symmetric_from_upper(&v[10..], 3),
                        }
                    }
                    other => return Err(perr(format!("unknown factor kind `{other}`"))),
                };
                graph.add_factor(factor).map_err(|e| perr(e.to_string()))?;
            }
            other => return Err(perr(format!("unknown record `{other}`"))),
        }
    }
    Ok(graph)
}
