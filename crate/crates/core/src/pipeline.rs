//! End-to-end orchestration: scan-to-map odometry, key-frames, ground
//! extraction and association, the two-step pose-graph optimization and ATE
//! evaluation.

use std::io::Write;
use std::time::Instant;

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::association::{associate_or_spawn, plane_innovation, Association};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::graph::{
    detect_loop_closures_verbose, optimize, plane_in_world, Factor, FactorKind, LoopCandidate, OptimizeReport, PoseGraph,
};
use crate::ground::extract_ground;
pub use crate::keyframe::{should_create_keyframe, KeyFrame, KeyFramePolicy};
use crate::registration::{register_point_to_plane, Scan};
use crate::se3::{Pose, PoseCovariance, StampedPose, Trajectory};
use crate::sliding_map::{maintain_with_stats, maintain_range_based, recenter, SlidingMap};
use crate::spatial::voxel_filter;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaintenanceMode {
    RangeBased,
    ObservationBased,
}

impl std::str::FromStr for MaintenanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "range" | "range_based" => Ok(Self::RangeBased),
            "observation" | "observation_based" => Ok(Self::ObservationBased),
            _ => Err(Error::Config(format!("unknown mode `{s}` (expected range or observation)"))),
        }
    }
}

/// Per-frame odometry statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameStats {
    pub frame: usize,
    pub timestamp: f64,
    pub map_points: usize,
    pub elapsed_ms: f64,
    pub inliers: usize,
    pub rms_residual: f64,
}

/// One odometry step: the increment mapping frame-`k` points into frame
/// `k−1` and its left-perturbation covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Increment {
    pub transform: Pose,
    pub covariance: PoseCovariance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdometryOutput {
    pub trajectory: Trajectory,
    pub stats: Vec<FrameStats>,
    /// `increments[k]` links frame `k−1` to frame `k`; entry 0 is the identity.
    pub increments: Vec<Increment>,
    pub keyframes: Vec<KeyFrame>,
}

impl OdometryOutput {
    pub fn mean_map_points(&self) -> f64 {
        self.stats.iter().map(|s| s.map_points as f64).sum::<f64>() / self.stats.len().max(1) as f64
    }
}

/// Relative motion priors from an absolute prior trajectory:
/// `priors[k] = P_{k−1}⁻¹ P_k`, with the identity first.
pub fn relative_priors(absolute: &[Pose]) -> Vec<Pose> {
    let mut out = Vec::with_capacity(absolute.len());
    for (k, p) in absolute.iter().enumerate() {
        out.push(if k == 0 {
            Pose::identity()
        } else {
            absolute[k - 1].inverse().compose(p)
        });
    }
    out
}

fn gaussian6(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Vector6<f64> {
    let mut d = Vector6::zeros();
    for k in 0..6 {
        let z: f64 = StandardNormal.sample(rng);
        d[k] = z * if k < 3 { rot } else { trans };
    }
    d
}

/// Sequential register → recenter → maintain loop. The first scan's frame
/// is the world frame. `priors[k]` maps frame-`k` points into frame `k−1`.
pub fn run_odometry(scans: &[Scan], priors: &[Pose], cfg: &PipelineConfig, mode: MaintenanceMode) -> Result<OdometryOutput> {
    if scans.is_empty() {
        return Err(Error::InvalidInput("no scans".into()));
    }
    if priors.len() != scans.len() {
        return Err(Error::InvalidInput(format!(
            "{} scans but {} motion priors",
            scans.len(),
            priors.len()
        )));
    }
    let reg_cfg = cfg.registration();
    let maint_cfg = cfg.maintenance();
    let policy = cfg.keyframe_policy();
    let process = PoseCovariance::isotropic(cfg.process_noise_rot, cfg.process_noise_trans);
    let injected = PoseCovariance::isotropic(cfg.odom_noise_rot, cfg.odom_noise_trans);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.odometry_noise_seed());

    let start = Instant::now();
    let mut map = SlidingMap::from_scan(&scans[0], 0, cfg.insert_spacing);
    let mut pose = Pose::identity();
    let mut out = OdometryOutput {
        trajectory: vec![StampedPose {
            timestamp: scans[0].timestamp,
            pose,
        }],
        stats: vec![FrameStats {
            frame: 0,
            timestamp: scans[0].timestamp,
            map_points: map.len(),
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
            inliers: 0,
            rms_residual: 0.0,
        }],
        increments: vec![Increment {
            transform: Pose::identity(),
            covariance: PoseCovariance::zero(),
        }],
        keyframes: vec![KeyFrame {
            id: 0,
            frame_index: 0,
            timestamp: scans[0].timestamp,
            pose,
            local_map: map.clone(),
            ground: None,
        }],
    };

    for (k, scan) in scans.iter().enumerate().skip(1) {
        let t0 = Instant::now();
        let source = if cfg.scan_voxel > 0.0 {
            scan.select(&voxel_filter(&scan.points, cfg.scan_voxel))
        } else {
            scan.clone()
        };
        let res = register_point_to_plane(&source, &map, &priors[k], &reg_cfg).map_err(|e| Error::RegistrationFailure {
            frame: k,
            source: Box::new(e),
        })?;
        let measured = res.covariance.add(&process);
        // move the map into frame k, then maintain it with scan k
        let moved = recenter(&map, &res.transform.inverse(), &measured.for_inverse(&res.transform));
        map = match mode {
            MaintenanceMode::ObservationBased => maintain_with_stats(&moved, scan, &maint_cfg).0,
            MaintenanceMode::RangeBased => maintain_range_based(&moved, scan, cfg.range_cutoff, &maint_cfg),
        };
        // injected noise corrupts the pose chain only; perturbing the map as
        // well would let the next registration undo it
        let (step, covariance) = if cfg.odom_noise_rot > 0.0 || cfg.odom_noise_trans > 0.0 {
            let noise = gaussian6(&mut noise_rng, cfg.odom_noise_rot, cfg.odom_noise_trans);
            (res.transform.retract_left(&noise), measured.add(&injected))
        } else {
            (res.transform, measured)
        };
        pose = pose.compose(&step);
        out.trajectory.push(StampedPose {
            timestamp: scan.timestamp,
            pose,
        });
        out.increments.push(Increment {
            transform: step,
            covariance,
        });
        out.stats.push(FrameStats {
            frame: k,
            timestamp: scan.timestamp,
            map_points: map.len(),
            elapsed_ms: t0.elapsed().as_secs_f64() * 1e3,
            inliers: res.inlier_count,
            rms_residual: res.rms_residual,
        });
        let last = out.keyframes.last().map(|kf| kf.pose);
        if should_create_keyframe(last.as_ref(), &pose, &policy) {
            out.keyframes.push(KeyFrame {
                id: out.keyframes.len(),
                frame_index: k,
                timestamp: scan.timestamp,
                pose,
                local_map: map.clone(),
                ground: None,
            });
        }
    }
    Ok(out)
}

/// `frame,timestamp,map_points,elapsed_ms,inliers,rms_residual` rows.
pub fn write_stats_csv<W: Write>(mut w: W, stats: &[FrameStats]) -> Result<()> {
    writeln!(w, "frame,timestamp,map_points,elapsed_ms,inliers,rms_residual")?;
    for s in stats {
        writeln!(
            w,
            "{},{:.6},{},{:.3},{},{:.6}",
            s.frame, s.timestamp, s.map_points, s.elapsed_ms, s.inliers, s.rms_residual
        )?;
    }
    Ok(())
}

/// Composed increment between two frames with its covariance accumulated
/// through the adjoint: `Σ ← Σ + Ad(A) Σ_k Ad(A)ᵀ`.
pub fn accumulate_increments(increments: &[Increment]) -> Increment {
    let mut acc = Pose::identity();
    let mut cov = Matrix6::zeros();
    for inc in increments {
        let ad = acc.adjoint();
        cov += ad * inc.covariance.to_matrix6() * ad.transpose();
        acc = acc.compose(&inc.transform);
    }
    Increment {
        transform: acc,
        covariance: PoseCovariance::from_matrix6(&((cov + cov.transpose()) * 0.5)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlamToggles {
    pub ground_constraints: bool,
    pub loop_closure: bool,
}

impl Default for SlamToggles {
    fn default() -> Self {
        Self {
            ground_constraints: true,
            loop_closure: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlamOutput {
    pub trajectory: Trajectory,
    pub odometry: OdometryOutput,
    /// Final graph, with optimized node values.
    pub graph: PoseGraph,
    /// Key-frame poses as produced by odometry, before any optimization.
    pub initial_keyframe_poses: Vec<Pose>,
    /// Trajectory after the ground step and before loop factors are added.
    pub pre_loop_trajectory: Trajectory,
    pub reports: Vec<(String, OptimizeReport)>,
    pub loop_candidates: Vec<LoopCandidate>,
    /// For every key-frame, the landmark its ground observation joined.
    pub keyframe_landmarks: Vec<Option<usize>>,
}

impl SlamOutput {
    pub fn keyframe_poses(&self) -> Vec<Pose> {
        self.graph.poses.iter().map(|n| n.pose).collect()
    }

    /// Key-frame local maps carried into the world frame, one point per voxel.
    pub fn world_map(&self, voxel: f64) -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for (kf, node) in self.odometry.keyframes.iter().zip(&self.graph.poses) {
            pts.extend(kf.local_map.positions().map(|p| node.pose.transform_point(&p)));
        }
        voxel_filter(&pts, voxel).into_iter().map(|i| pts[i]).collect()
    }
}

fn keyframe_error(keyframe: usize) -> impl Fn(Error) -> Error {
    move |e| Error::KeyFrame {
        keyframe,
        source: Box::new(e),
    }
}

/// Ground observation for every key-frame; failures leave `None`.
pub fn observe_ground(keyframes: &mut [KeyFrame], cfg: &PipelineConfig) {
    let gcfg = cfg.ground();
    for kf in keyframes.iter_mut() {
        kf.ground = match extract_ground(&kf.local_map, -cfg.sensor_height, &gcfg) {
            Ok(obs) => Some(obs),
            Err(e) => {
                log::debug!("key-frame {}: no ground ({e})", kf.id);
                None
            }
        };
    }
}

/// Adds plane landmarks and ground factors. Returns the landmark per key-frame.
pub fn add_ground_factors(graph: &mut PoseGraph, keyframes: &[KeyFrame], cfg: &PipelineConfig) -> Result<Vec<Option<usize>>> {
    let tilt_gate = cfg.ground_tilt_gate_deg.to_radians();
    let mut reference: Option<Vector3<f64>> = None;
    let mut previous: Option<(usize, usize)> = None;
    let mut assigned = vec![None; keyframes.len()];
    for (j, kf) in keyframes.iter().enumerate() {
        let Some(obs) = kf.ground else { continue };
        let pose = graph.poses[j].pose;
        let world_normal = pose.rotation * obs.plane.normal();
        let reference_normal = *reference.get_or_insert(world_normal);
        if world_normal.dot(&reference_normal).clamp(-1.0, 1.0).acos() > tilt_gate {
            log::debug!("key-frame {}: ground tilted beyond gate", kf.id);
            continue;
        }
        let wrap = keyframe_error(kf.id);
        let landmark = match previous {
            Some((i, landmark)) => {
                let prev_obs = keyframes[i].ground.expect("previous key-frame has ground");
                let t_i_j = pose.inverse().compose(&graph.poses[i].pose);
                let inn = plane_innovation(&prev_obs, &obs, &t_i_j, cfg.plane_pose_noise).map_err(&wrap)?;
                match associate_or_spawn(Some(landmark), &inn, cfg.gate) {
                    Association::SamePlane(id) => id,
                    Association::NewPlane => graph.add_plane(plane_in_world(&obs, &pose).map_err(&wrap)?),
                }
            }
            None => graph.add_plane(plane_in_world(&obs, &pose).map_err(&wrap)?),
        };
        log::debug!(
            "key-frame {}: landmark {landmark}, support {}, world normal {:?}",
            kf.id,
            obs.support_count,
            world_normal.as_slice()
        );
        let factor = Factor::plane_observation(j, landmark, obs, &pose).map_err(&wrap)?;
        graph.add_factor(factor)?;
        assigned[j] = Some(landmark);
        previous = Some((j, landmark));
    }
    Ok(assigned)
}

/// Key-frame pose graph with odometry factors only.
pub fn odometry_graph(odo: &OdometryOutput) -> Result<PoseGraph> {
    let mut graph = PoseGraph::new();
    for kf in &odo.keyframes {
        graph.add_pose(kf.pose);
    }
    for (a, pair) in odo.keyframes.windows(2).enumerate() {
        let inc = accumulate_increments(&odo.increments[pair[0].frame_index + 1..=pair[1].frame_index]);
        let cov = inc.covariance.to_matrix6() + Matrix6::identity() * 1e-12;
        let info = cov
            .try_inverse()
            .ok_or(Error::NonInvertibleCovariance)
            .map_err(keyframe_error(pair[1].id))?;
        graph.add_factor(Factor::odometry(a, a + 1, inc.transform, (info + info.transpose()) * 0.5))?;
    }
    Ok(graph)
}

/// Every frame re-anchored on its preceding key-frame's optimized pose.
fn corrected_trajectory(odo: &OdometryOutput, kf_poses: &[Pose]) -> Trajectory {
    let mut out = Vec::with_capacity(odo.trajectory.len());
    let mut kf = 0;
    for (k, sp) in odo.trajectory.iter().enumerate() {
        while kf + 1 < odo.keyframes.len() && odo.keyframes[kf + 1].frame_index <= k {
            kf += 1;
        }
        let anchor = &odo.keyframes[kf];
        let rel = anchor.pose.inverse().compose(&sp.pose);
        out.push(StampedPose {
            timestamp: sp.timestamp,
            pose: kf_poses[kf].compose(&rel),
        });
    }
    out
}

/// Odometry, key-frame ground observations, ground-constrained optimization,
/// then loop closures and a final optimization.
pub fn run_slam(scans: &[Scan], priors: &[Pose], cfg: &PipelineConfig, toggles: SlamToggles) -> Result<SlamOutput> {
    let odo = run_odometry(scans, priors, cfg, MaintenanceMode::ObservationBased)?;
    run_backend(odo, cfg, toggles)
}

/// Ground and loop stages on top of a finished odometry run.
pub fn run_backend(mut odo: OdometryOutput, cfg: &PipelineConfig, toggles: SlamToggles) -> Result<SlamOutput> {
    let mut graph = odometry_graph(&odo)?;
    let initial_keyframe_poses: Vec<Pose> = graph.poses.iter().map(|n| n.pose).collect();
    let lm = cfg.lm();
    let mut reports = Vec::new();
    let mut keyframe_landmarks = vec![None; odo.keyframes.len()];
    let mut optimized = false;

    if toggles.ground_constraints {
        observe_ground(&mut odo.keyframes, cfg);
        keyframe_landmarks = add_ground_factors(&mut graph, &odo.keyframes, cfg)?;
        let (g, report) = optimize(&graph, &lm)?;
        graph = g;
        reports.push(("ground".to_string(), report));
        optimized = true;
    }
    let kf_poses: Vec<Pose> = graph.poses.iter().map(|n| n.pose).collect();
    let pre_loop_trajectory = if optimized {
        corrected_trajectory(&odo, &kf_poses)
    } else {
        odo.trajectory.clone()
    };

    let mut loop_candidates = Vec::new();
    if toggles.loop_closure {
        let (factors, tried) = detect_loop_closures_verbose(&odo.keyframes, &kf_poses, &cfg.loop_closure());
        loop_candidates = tried;
        if !factors.is_empty() {
            for f in factors {
                graph.add_factor(f)?;
            }
            let (g, report) = optimize(&graph, &lm)?;
            graph = g;
            reports.push(("loop".to_string(), report));
            optimized = true;
        }
    }

    let trajectory = if optimized {
        corrected_trajectory(&odo, &graph.poses.iter().map(|n| n.pose).collect::<Vec<_>>())
    } else {
        odo.trajectory.clone()
    };
    log::info!(
        "slam: {} key-frames, {} landmarks, {} loop factors",
        graph.poses.len(),
        graph.planes.len(),
        graph.count(FactorKind::LoopClosure)
    );
    Ok(SlamOutput {
        trajectory,
        odometry: odo,
        graph,
        initial_keyframe_poses,
        pre_loop_trajectory,
        reports,
        loop_candidates,
        keyframe_landmarks,
    })
}

/// Translation and rotation error of one matched frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameError {
    pub timestamp: f64,
    pub translation: Vector3<f64>,
    /// Roll, pitch, yaw of `R_gtᵀ R_est`, degrees.
    pub euler_deg: Vector3<f64>,
    pub rotation_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AteReport {
    pub rmse_total_m: f64,
    pub rmse_x_m: f64,
    pub rmse_y_m: f64,
    pub rmse_z_m: f64,
    pub rot_rmse_roll_deg: f64,
    pub rot_rmse_pitch_deg: f64,
    pub rot_rmse_yaw_deg: f64,
    pub rot_rmse_total_deg: f64,
    pub matched_frames: usize,
    pub aligned: bool,
    pub per_frame: Vec<FrameError>,
}

impl AteReport {
    /// `key = value` lines with fixed key names.
    pub fn to_text(&self) -> String {
        let fields = [
            ("rmse_total_m", self.rmse_total_m),
            ("rmse_x_m", self.rmse_x_m),
            ("rmse_y_m", self.rmse_y_m),
            ("rmse_z_m", self.rmse_z_m),
            ("rot_rmse_roll_deg", self.rot_rmse_roll_deg),
            ("rot_rmse_pitch_deg", self.rot_rmse_pitch_deg),
            ("rot_rmse_yaw_deg", self.rot_rmse_yaw_deg),
            ("rot_rmse_total_deg", self.rot_rmse_total_deg),
        ];
        let mut s: String = fields.iter().map(|(k, v)| format!("{k} = {v:.9}\n")).collect();
        s.push_str(&format!("matched_frames = {}\naligned = {}\n", self.matched_frames, self.aligned));
        s
    }
}

/// Rigid transform `G` minimizing `Σ |gᵢ − G eᵢ|²` (no scale).
///
/// `orientation_hint` (typically `Σ R_g R_eᵀ`) only settles rotations the
/// positions leave free, e.g. the roll about a straight-line trajectory.
pub fn umeyama_rigid(estimated: &[Vector3<f64>], reference: &[Vector3<f64>], orientation_hint: &Matrix3<f64>) -> Pose {
    let n = estimated.len().min(reference.len()) as f64;
    let mu_e = estimated.iter().sum::<Vector3<f64>>() / n;
    let mu_g = reference.iter().sum::<Vector3<f64>>() / n;
    let mut sigma = Matrix3::zeros();
    for (e, g) in estimated.iter().zip(reference) {
        sigma += (g - mu_g) * (e - mu_e).transpose();
    }
    sigma /= n;
    let mut values = sigma.singular_values().as_slice().to_vec();
    values.sort_by(|a, b| b.total_cmp(a));
    if values[1] <= 1e-9 * values[0].max(1e-12) {
        sigma += orientation_hint * (1e-6 * values[0].max(1e-12));
    }
    let svd = sigma.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        let k = svd.singular_values.imin();
        s[(k, k)] = -1.0;
    }
    let r = u * s * v_t;
    Pose::new(r, mu_g - r * mu_e)
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    (sum / n.max(1) as f64).sqrt()
}

/// Matches frames by timestamp (within 0.01 s), optionally aligns the
/// estimate rigidly onto the reference, and reports RMSEs.
pub fn evaluate_ate(estimated: &[StampedPose], reference: &[StampedPose], align: bool) -> Result<AteReport> {
    let mut sorted: Vec<&StampedPose> = reference.iter().collect();
    sorted.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let mut pairs = Vec::new();
    for e in estimated {
        let k = sorted.partition_point(|g| g.timestamp < e.timestamp);
        let best = [k.checked_sub(1), Some(k)]
            .into_iter()
            .flatten()
            .filter_map(|i| sorted.get(i))
            .min_by(|a, b| (a.timestamp - e.timestamp).abs().total_cmp(&(b.timestamp - e.timestamp).abs()));
        if let Some(g) = best.filter(|g| (g.timestamp - e.timestamp).abs() <= 0.01) {
            pairs.push((e, *g));
        }
    }
    if pairs.len() < 2 {
        return Err(Error::NoOverlap);
    }
    let alignment = if align {
        let est: Vec<_> = pairs.iter().map(|(e, _)| e.pose.translation).collect();
        let gt: Vec<_> = pairs.iter().map(|(_, g)| g.pose.translation).collect();
        let hint = pairs
            .iter()
            .map(|(e, g)| g.pose.rotation * e.pose.rotation.transpose())
            .sum::<Matrix3<f64>>();
        umeyama_rigid(&est, &gt, &hint)
    } else {
        Pose::identity()
    };
    let per_frame: Vec<FrameError> = pairs
        .iter()
        .map(|(e, g)| {
            let est = alignment.compose(&e.pose);
            let rot_err = Pose::new(g.pose.rotation.transpose() * est.rotation, Vector3::zeros());
            let (r, p, y) = rot_err.euler_angles();
            FrameError {
                timestamp: e.timestamp,
                translation: est.translation - g.pose.translation,
                euler_deg: Vector3::new(r, p, y).map(f64::to_degrees),
                rotation_deg: rot_err.rotation_angle().to_degrees(),
            }
        })
        .collect();
    Ok(AteReport {
        rmse_total_m: rms(per_frame.iter().map(|f| f.translation.norm())),
        rmse_x_m: rms(per_frame.iter().map(|f| f.translation.x)),
        rmse_y_m: rms(per_frame.iter().map(|f| f.translation.y)),
        rmse_z_m: rms(per_frame.iter().map(|f| f.translation.z)),
        rot_rmse_roll_deg: rms(per_frame.iter().map(|f| f.euler_deg.x)),
        rot_rmse_pitch_deg: rms(per_frame.iter().map(|f| f.euler_deg.y)),
        rot_rmse_yaw_deg: rms(per_frame.iter().map(|f| f.euler_deg.z)),
        rot_rmse_total_deg: rms(per_frame.iter().map(|f| f.rotation_deg)),
        matched_frames: per_frame.len(),
        aligned: align,
        per_frame,
    })
}

/// Simulated data set: scans, the ground truth rebased onto the first frame,
/// and the dead-reckoned motion prior.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedRun {
    pub scans: Vec<Scan>,
    pub ground_truth: Trajectory,
    pub prior_trajectory: Trajectory,
}

impl SimulatedRun {
    pub fn relative_priors(&self) -> Vec<Pose> {
        relative_priors(&self.prior_trajectory.iter().map(|s| s.pose).collect::<Vec<_>>())
    }
}

pub fn simulate_run(scenario: &str, cfg: &PipelineConfig, max_frames: Option<usize>) -> Result<SimulatedRun> {
    use crate::sim::{generate_scenario, motion_prior, raycast_scan};
    let (world, traj) = generate_scenario(scenario, &cfg.scenario())?;
    let sensor = cfg.sensor();
    let samples = traj.sample(cfg.scan_rate_hz, max_frames);
    let scans: Vec<Scan> = samples
        .iter()
        .map(|s| raycast_scan(&world, &sensor, &s.pose, s.timestamp).scan)
        .collect();
    let mut prior = Pose::identity();
    let mut prior_trajectory = Vec::with_capacity(samples.len());
    for (k, s) in samples.iter().enumerate() {
        if k > 0 {
            let step = motion_prior(&traj, samples[k - 1].timestamp, s.timestamp, &cfg.prior_noise(), cfg.prior_seed())?;
            prior = prior.compose(&step);
        }
        prior_trajectory.push(StampedPose {
            timestamp: s.timestamp,
            pose: prior,
        });
    }
    Ok(SimulatedRun {
        scans,
        ground_truth: crate::se3::rebase_to_first(&samples),
        prior_trajectory,
    })
}
