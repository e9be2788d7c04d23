//! Deterministic LiDAR simulator over worlds made of rectangular patches.
//!
//! Ground-truth worlds use `z` up with the drivable floor at `z = 0`. Ranges
//! carry Gaussian noise plus a systematic lengthening that grows with the
//! incidence angle.

use std::io::{Read, Write};

use nalgebra::{Matrix3, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::registration::Scan;
use crate::se3::{so3_exp, so3_log, Pose, StampedPose, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceKind {
    Floor,
    Wall,
    Ceiling,
    Ramp,
}

/// Rectangle `center + a·u + b·v` with `|a| <= half_u`, `|b| <= half_v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Patch {
    pub kind: SurfaceKind,
    pub center: Vector3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
}

impl Patch {
    pub fn new(kind: SurfaceKind, center: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>, half_u: f64, half_v: f64) -> Result<Self> {
        let u = u.normalize();
        let v = (v - u * u.dot(&v)).normalize();
        if !(half_u > 0.0 && half_v > 0.0) || !v.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidInput("patch must have positive area".into()));
        }
        Ok(Self {
            kind,
            center,
            u,
            v,
            half_u,
            half_v,
        })
    }

    /// `u × v`.
    pub fn normal(&self) -> Vector3<f64> {
        self.u.cross(&self.v)
    }

    /// Distance along `dir` (unit) to the patch, with the incidence angle.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let n = self.normal();
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = n.dot(&(self.center - origin)) / denom;
        if s <= 1e-6 {
            return None;
        }
        let rel = origin + dir * s - self.center;
        if rel.dot(&self.u).abs() > self.half_u || rel.dot(&self.v).abs() > self.half_v {
            return None;
        }
        Some((s, denom.abs().min(1.0).acos()))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WorldModel {
    pub patches: Vec<Patch>,
}

impl WorldModel {
    pub fn count(&self, kind: SurfaceKind) -> usize {
        self.patches.iter().filter(|p| p.kind == kind).count()
    }

    /// Horizontal patch at height `z`, normal `+z` for floors and `-z` for ceilings.
    fn horizontal(&mut self, kind: SurfaceKind, x: (f64, f64), y: (f64, f64), z: f64) {
        let v = if kind == SurfaceKind::Ceiling {
            -Vector3::y()
        } else {
            Vector3::y()
        };
        self.add(kind, Vector3::new((x.0 + x.1) / 2.0, (y.0 + y.1) / 2.0, z), Vector3::x(), v, (x.1 - x.0) / 2.0, (y.1 - y.0) / 2.0);
    }

    /// Vertical wall in the plane `x = const`.
    fn wall_x(&mut self, x: f64, y: (f64, f64), z: (f64, f64)) {
        self.add(SurfaceKind::Wall, Vector3::new(x, (y.0 + y.1) / 2.0, (z.0 + z.1) / 2.0), Vector3::y(), Vector3::z(), (y.1 - y.0) / 2.0, (z.1 - z.0) / 2.0);
    }

    /// Vertical wall in the plane `y = const`.
    fn wall_y(&mut self, y: f64, x: (f64, f64), z: (f64, f64)) {
        self.add(SurfaceKind::Wall, Vector3::new((x.0 + x.1) / 2.0, y, (z.0 + z.1) / 2.0), Vector3::x(), Vector3::z(), (x.1 - x.0) / 2.0, (z.1 - z.0) / 2.0);
    }

    /// Axis-aligned box without a bottom face.
    fn block(&mut self, x: (f64, f64), y: (f64, f64), z: (f64, f64)) {
        self.wall_x(x.0, y, z);
        self.wall_x(x.1, y, z);
        self.wall_y(y.0, x, z);
        self.wall_y(y.1, x, z);
        self.horizontal(SurfaceKind::Wall, x, y, z.1);
    }

    fn add(&mut self, kind: SurfaceKind, c: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>, hu: f64, hv: f64) {
        self.patches.push(Patch::new(kind, c, u, v, hu, hv).expect("scenario patch"));
    }

    /// Closest hit along the ray: `(range, incidence)`.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, max_range: f64) -> Option<(f64, f64)> {
        self.patches
            .iter()
            .filter_map(|p| p.intersect(origin, dir))
            .filter(|&(s, _)| s <= max_range)
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasModel {
    SinSquared,
    OneMinusCos,
    ThetaSquared,
}

impl std::str::FromStr for BiasModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sin2" => Ok(Self::SinSquared),
            "one_minus_cos" => Ok(Self::OneMinusCos),
            "theta2" => Ok(Self::ThetaSquared),
            _ => Err(Error::Config(format!("unknown bias model `{s}`"))),
        }
    }
}

/// Range bias magnitude at `incidence` radians.
pub fn bias(incidence: f64, bias_max: f64) -> f64 {
    bias_with(BiasModel::SinSquared, incidence, bias_max)
}

pub fn bias_with(model: BiasModel, incidence: f64, bias_max: f64) -> f64 {
    let t = incidence.clamp(0.0, std::f64::consts::FRAC_PI_2);
    bias_max
        * match model {
            BiasModel::SinSquared => t.sin().powi(2),
            BiasModel::OneMinusCos => 1.0 - t.cos(),
            BiasModel::ThetaSquared => (t / std::f64::consts::FRAC_PI_2).powi(2),
        }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorModel {
    pub n_beams_vertical: usize,
    /// Elevation of the lowest and highest beam, radians.
    pub vertical_fov: (f64, f64),
    pub horizontal_step: f64,
    pub max_range: f64,
    pub range_noise_sigma: f64,
    pub bias_max: f64,
    pub bias_model: BiasModel,
    pub rng_seed: u64,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            n_beams_vertical: 40,
            vertical_fov: ((-25f64).to_radians(), 15f64.to_radians()),
            horizontal_step: 1.5f64.to_radians(),
            max_range: 80.0,
            range_noise_sigma: 0.02,
            bias_max: 0.2,
            bias_model: BiasModel::SinSquared,
            rng_seed: 1,
        }
    }
}

impl SensorModel {
    /// Unit beam directions in the sensor frame, in firing order.
    pub fn beam_directions(&self) -> Vec<Vector3<f64>> {
        let cols = (std::f64::consts::TAU / self.horizontal_step).round().max(1.0) as usize;
        let (lo, hi) = self.vertical_fov;
        let mut dirs = Vec::with_capacity(cols * self.n_beams_vertical);
        for c in 0..cols {
            let az = c as f64 * std::f64::consts::TAU / cols as f64;
            for r in 0..self.n_beams_vertical {
                let el = if self.n_beams_vertical == 1 {
                    lo
                } else {
                    lo + (hi - lo) * r as f64 / (self.n_beams_vertical - 1) as f64
                };
                dirs.push(Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()));
            }
        }
        dirs
    }
}

/// Range-aligned point covariance `σ² d dᵀ + 10⁻⁶ I` for a sensor-frame point.
pub fn point_covariance(p: &Vector3<f64>, range_sigma: f64) -> Matrix3<f64> {
    let n = p.norm();
    let d = if n > 0.0 { p / n } else { Vector3::z() };
    d * d.transpose() * range_sigma * range_sigma + Matrix3::identity() * 1e-6
}

/// SplitMix64 finalizer, used to derive stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn seed_from(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6a09_e667_f3bc_c908, |acc, &p| mix(acc ^ p))
}

fn pose_seed(seed: u64, pose: &Pose) -> u64 {
    let bits: Vec<u64> = std::iter::once(seed)
        .chain(pose.rotation.iter().map(|v| v.to_bits()))
        .chain(pose.translation.iter().map(|v| v.to_bits()))
        .collect();
    seed_from(&bits)
}

/// A simulated sweep with the true incidence angle of every return.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedScan {
    pub scan: Scan,
    pub incidence: Vec<f64>,
}

/// Casts every beam from `pose` (sensor to world). Returned points are in the
/// sensor frame; range = true range + bias + noise.
pub fn raycast_scan(world: &WorldModel, sensor: &SensorModel, pose: &Pose, timestamp: f64) -> SimulatedScan {
    let mut rng = ChaCha8Rng::seed_from_u64(pose_seed(sensor.rng_seed, pose));
    let mut points = Vec::new();
    let mut covs = Vec::new();
    let mut incidence = Vec::new();
    for d in sensor.beam_directions() {
        // one draw per beam keeps the stream aligned with the beam index
        let z: f64 = StandardNormal.sample(&mut rng);
        let world_dir = pose.rotation * d;
        let Some((range, theta)) = world.cast(&pose.translation, &world_dir, sensor.max_range) else {
            continue;
        };
        let measured = range + bias_with(sensor.bias_model, theta, sensor.bias_max) + sensor.range_noise_sigma * z;
        if measured <= 0.0 {
            continue;
        }
        let p = d * measured;
        covs.push(point_covariance(&p, sensor.range_noise_sigma));
        points.push(p);
        incidence.push(theta);
    }
    SimulatedScan {
        scan: Scan {
            points,
            per_point_cov: covs,
            timestamp,
        },
        incidence,
    }
}

/// Waypoints joined by constant-velocity segments (linear translation,
/// geodesic rotation).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    waypoints: Vec<StampedPose>,
}

impl TrajectorySpec {
    pub fn new(waypoints: Vec<StampedPose>) -> Result<Self> {
        if waypoints.is_empty() {
            return Err(Error::InvalidInput("trajectory needs at least one waypoint".into()));
        }
        if waypoints.windows(2).any(|w| !(w[1].timestamp > w[0].timestamp)) {
            return Err(Error::InvalidInput("waypoint timestamps must be strictly increasing".into()));
        }
        Ok(Self { waypoints })
    }

    pub fn waypoints(&self) -> &[StampedPose] {
        &self.waypoints
    }

    pub fn start(&self) -> f64 {
        self.waypoints[0].timestamp
    }

    pub fn end(&self) -> f64 {
        self.waypoints[self.waypoints.len() - 1].timestamp
    }

    pub fn pose_at(&self, t: f64) -> Result<Pose> {
        if !(t >= self.start() && t <= self.end()) {
            return Err(Error::OutOfSpan {
                t,
                start: self.start(),
                end: self.end(),
            });
        }
        let k = self.waypoints.partition_point(|w| w.timestamp <= t);
        if k >= self.waypoints.len() {
            return Ok(self.waypoints[self.waypoints.len() - 1].pose);
        }
        let (a, b) = (&self.waypoints[k - 1], &self.waypoints[k]);
        let alpha = (t - a.timestamp) / (b.timestamp - a.timestamp);
        let dr = so3_log(&(a.pose.rotation.transpose() * b.pose.rotation));
        Ok(Pose::new(
            a.pose.rotation * so3_exp(&(dr * alpha)),
            a.pose.translation + (b.pose.translation - a.pose.translation) * alpha,
        ))
    }

    /// Poses sampled at `rate_hz` from the start, at most `max_frames` of them.
    pub fn sample(&self, rate_hz: f64, max_frames: Option<usize>) -> Trajectory {
        let mut out = Vec::new();
        let mut k = 0usize;
        loop {
            let t = self.start() + k as f64 / rate_hz;
            if t > self.end() + 1e-9 || max_frames.is_some_and(|m| out.len() >= m) {
                break;
            }
            let t = t.min(self.end());
            out.push(StampedPose {
                timestamp: t,
                pose: self.pose_at(t).expect("sample inside span"),
            });
            k += 1;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionNoise {
    pub rot_sigma: f64,
    pub trans_sigma: f64,
}

/// True relative pose `T(t0)⁻¹ T(t1)` perturbed on the left by seeded noise.
pub fn motion_prior(traj: &TrajectorySpec, t0: f64, t1: f64, noise: &MotionNoise, seed: u64) -> Result<Pose> {
    let a = traj.pose_at(t0)?;
    let b = traj.pose_at(t1)?;
    if t0 == t1 {
        return Ok(Pose::identity());
    }
    let truth = a.inverse().compose(&b);
    let mut rng = ChaCha8Rng::seed_from_u64(seed_from(&[seed, t0.to_bits(), t1.to_bits()]));
    let mut d = Vector6::zeros();
    for k in 0..6 {
        let s = if k < 3 { noise.rot_sigma } else { noise.trans_sigma };
        let z: f64 = StandardNormal.sample(&mut rng);
        d[k] = s * z;
    }
    Ok(truth.retract_left(&d))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioParams {
    pub corridor_length: f64,
    pub floor_spacing: f64,
    pub road_length: f64,
    pub loop_side: f64,
    /// Vehicle speed, m/s.
    pub speed: f64,
    pub sensor_height: f64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            corridor_length: 100.0,
            floor_spacing: 3.0,
            road_length: 220.0,
            loop_side: 50.0,
            speed: 10.0,
            sensor_height: 1.5,
        }
    }
}

pub const SCENARIOS: [&str; 5] = ["corridor", "square_loop", "bowl_road", "two_floor_garage", "ramp_junction"];

pub fn generate_scenario(name: &str, params: &ScenarioParams) -> Result<(WorldModel, TrajectorySpec)> {
    if !(params.speed > 0.0 && params.sensor_height > 0.0 && params.floor_spacing > 0.0) {
        return Err(Error::InvalidInput("scenario parameters must be positive".into()));
    }
    match name {
        "corridor" => corridor(params),
        "square_loop" => square_loop(params),
        "bowl_road" => bowl_road(params),
        "two_floor_garage" => two_floor_garage(params),
        "ramp_junction" => ramp_junction(params),
        other => Err(Error::UnknownScenario(other.to_string())),
    }
}

/// Timestamps from arc length along a polyline of poses.
fn drive(poses: Vec<Pose>, speed: f64) -> Result<TrajectorySpec> {
    let mut t = 0.0;
    let mut out = Vec::with_capacity(poses.len());
    for (k, p) in poses.iter().enumerate() {
        if k > 0 {
            t += (p.translation - poses[k - 1].translation).norm() / speed;
        }
        out.push(StampedPose { timestamp: t, pose: *p });
    }
    TrajectorySpec::new(out)
}

fn corridor(p: &ScenarioParams) -> Result<(WorldModel, TrajectorySpec)> {
    let len = p.corridor_length;
    let (half_w, height) = (2.0, 3.0);
    let mut w = WorldModel::default();
    let x = (-5.0, len + 5.0);
    w.horizontal(SurfaceKind::Floor, x, (-half_w, half_w), 0.0);
    w.horizontal(SurfaceKind::Ceiling, x, (-half_w, half_w), height);
    w.wall_y(-half_w, x, (0.0, height));
    w.wall_y(half_w, x, (0.0, height));
    w.wall_x(x.0, (-half_w, half_w), (0.0, height));
    w.wall_x(x.1, (-half_w, half_w), (0.0, height));
    // pilasters break the translational symmetry along the hallway
    let mut k = 0;
    let mut px = 2.0;
    while px < len {
        let side = if k % 2 == 0 { -half_w } else { half_w - 0.3 };
        let width = 0.4 + 0.2 * (k % 3) as f64;
        w.block((px, px + width), (side, side + 0.3), (0.0, height));
        px += 4.0 + (k % 4) as f64 * 0.7;
        k += 1;
    }
    let h = p.sensor_height;
    let poses = vec![
        Pose::from_translation(Vector3::new(0.0, 0.0, h)),
        Pose::from_translation(Vector3::new(len - 5.0, 0.0, h)),
    ];
    Ok((w, drive(poses, p.speed)?))
}

fn square_loop(p: &ScenarioParams) -> Result<(WorldModel, TrajectorySpec)> {
    let half = p.loop_side / 2.0;
    let outer = half + 10.0;
    let mut w = WorldModel::default();
    w.horizontal(SurfaceKind::Floor, (-outer, outer), (-outer, outer), 0.0);
    // central building and surrounding walls
    let b = half - 8.0;
    w.block((-b, b), (-b, b), (0.0, 12.0));
    for s in [-outer, outer] {
        w.wall_x(s, (-outer, outer), (0.0, 6.0));
        w.wall_y(s, (-outer, outer), (0.0, 6.0));
    }
    // irregular pillars along the outer side of the road
    let mut k = 0u32;
    let mut a = -half + 3.0;
    while a < half - 3.0 {
        let off = half + 4.0 + (k % 3) as f64;
        let sz = 0.5 + 0.25 * (k % 2) as f64;
        for (cx, cy) in [(a, -off), (off, a), (-a, off), (-off, -a)] {
            w.block((cx - sz, cx + sz), (cy - sz, cy + sz), (0.0, 3.0 + (k % 4) as f64));
        }
        a += 7.0 + (k % 3) as f64;
        k += 1;
    }
    // counter-clockwise square with rounded corners, back past the start
    let h = p.sensor_height;
    let r = 6.0;
    let mut poses = Vec::new();
    let corners = [(half, -half), (half, half), (-half, half), (-half, -half)];
    let mut push = |x: f64, y: f64, yaw: f64| poses.push(Pose::from_euler(0.0, 0.0, yaw, Vector3::new(x, y, h)));
    push(-half + r, -half, 0.0);
    for (i, &(cx, cy)) in corners.iter().enumerate() {
        let yaw0 = i as f64 * std::f64::consts::FRAC_PI_2;
        let (dx, dy) = (yaw0.cos(), yaw0.sin());
        // arc centre is inset from the corner along both legs
        let (nx, ny) = (-dy, dx);
        let (ax, ay) = (cx - dx * r + nx * r, cy - dy * r + ny * r);
        for s in 0..=12 {
            let phi = yaw0 + std::f64::consts::FRAC_PI_2 * s as f64 / 12.0;
            push(ax + phi.sin() * r, ay - phi.cos() * r, phi);
        }
    }
    push(-half + r + 12.0, -half, std::f64::consts::TAU);
    Ok((w, drive(poses, p.speed)?))
}

fn bowl_road(p: &ScenarioParams) -> Result<(WorldModel, TrajectorySpec)> {
    let len = p.road_length;
    let mut w = WorldModel::default();
    let x = (-20.0, len + 20.0);
    w.horizontal(SurfaceKind::Floor, x, (-14.0, 14.0), 0.0);
    w.wall_y(-12.0, x, (0.0, 9.0));
    w.wall_y(12.0, x, (0.0, 7.0));
    w.wall_x(x.1, (-12.0, 12.0), (0.0, 9.0));
    let mut k = 0u32;
    let mut px = -15.0;
    while px < len + 15.0 {
        let side = if k % 2 == 0 { 1.0 } else { -1.0 };
        let y = side * (6.5 + (k % 3) as f64 * 0.8);
        w.block((px, px + 0.3), (y - 0.15, y + 0.15), (0.0, 4.0));
        if k % 3 == 1 {
            // parked vehicle
            let yc = -side * 8.5;
            w.block((px + 2.0, px + 6.5), (yc - 0.9, yc + 0.9), (0.0, 1.6));
        }
        px += 6.0 + (k % 4) as f64 * 1.3;
        k += 1;
    }
    let h = p.sensor_height;
    let poses = vec![
        Pose::from_translation(Vector3::new(0.0, 0.0, h)),
        Pose::from_translation(Vector3::new(len, 0.0, h)),
    ];
    Ok((w, drive(poses, p.speed)?))
}

/// Ground height and slope of a profile made of flat and sloped sections
/// joined by smooth transitions.
struct Profile {
    /// `(x_start, x_end, z_start, z_end)` of the sloped section.
    ramp: (f64, f64, f64, f64),
    blend: f64,
}

impl Profile {
    fn raw_slope(&self, x: f64) -> f64 {
        let (x0, x1, z0, z1) = self.ramp;
        if x > x0 && x < x1 {
            (z1 - z0) / (x1 - x0)
        } else {
            0.0
        }
    }

    /// Slope smoothed by a moving average of width `blend`, integrated for `z`.
    fn sample(&self, x: f64) -> (f64, f64) {
        let n = 200;
        let (x0, _, z0, _) = self.ramp;
        let slope = (0..n)
            .map(|i| self.raw_slope(x - self.blend / 2.0 + self.blend * (i as f64 + 0.5) / n as f64))
            .sum::<f64>()
            / n as f64;
        let start = x0 - self.blend;
        let m = ((x - start).max(0.0) / 0.05).ceil() as usize;
        let mut z = z0;
        for i in 0..m {
            let xa = start + (x - start) * (i as f64 + 0.5) / m as f64;
            let s = (0..20)
                .map(|j| self.raw_slope(xa - self.blend / 2.0 + self.blend * (j as f64 + 0.5) / 20.0))
                .sum::<f64>()
                / 20.0;
            z += s * (x - start) / m as f64;
        }
        (z, slope)
    }
}

fn profile_poses(profile: &Profile, x_start: f64, x_end: f64, y: f64, h: f64) -> Vec<Pose> {
    let mut poses = Vec::new();
    let mut x = x_start;
    while x <= x_end + 1e-9 {
        let (z, slope) = profile.sample(x);
        let pitch = -slope.atan();
        poses.push(Pose::from_euler(0.0, pitch, 0.0, Vector3::new(x, y, z + h)));
        x += 0.5;
    }
    poses
}

fn two_floor_garage(p: &ScenarioParams) -> Result<(WorldModel, TrajectorySpec)> {
    let dz = p.floor_spacing;
    let slope = 15f64.to_radians();
    let ramp_len = dz / slope.tan();
    let (r0, r1) = (40.0, 40.0 + ramp_len);
    let b3_end = r1 + 45.0;
    let (hw, rw) = (8.0, 2.5);
    let mut w = WorldModel::default();
    // upper level: floor at 0, ceiling at +spacing
    w.horizontal(SurfaceKind::Floor, (-10.0, r0), (-hw, hw), 0.0);
    w.horizontal(SurfaceKind::Ceiling, (-10.0, r1), (-hw, hw), dz);
    w.wall_x(-10.0, (-hw, hw), (0.0, dz));
    w.wall_y(-hw, (-10.0, r1), (0.0, dz));
    w.wall_y(hw, (-10.0, r1), (0.0, dz));
    // lower level: floor at −spacing, ceiling is the upper slab
    w.horizontal(SurfaceKind::Floor, (r1, b3_end), (-hw, hw), -dz);
    w.horizontal(SurfaceKind::Ceiling, (r1, b3_end), (-hw, hw), 0.0);
    w.wall_x(b3_end, (-hw, hw), (-dz, 0.0));
    w.wall_y(-hw, (r1, b3_end), (-dz, 0.0));
    w.wall_y(hw, (r1, b3_end), (-dz, 0.0));
    // ramp well with side walls, closed off from the upper floor beside it
    let ramp_c = Vector3::new((r0 + r1) / 2.0, 0.0, -dz / 2.0);
    let along = Vector3::new(ramp_len, 0.0, -dz).normalize();
    w.add(SurfaceKind::Ramp, ramp_c, along, Vector3::y(), ramp_len / (2.0 * slope.cos()), rw);
    for s in [-rw, rw] {
        w.wall_y(s, (r0, r1), (-dz, 0.0));
    }
    for (y0, y1) in [(-hw, -rw), (rw, hw)] {
        w.horizontal(SurfaceKind::Floor, (r0, r1), (y0, y1), 0.0);
        w.wall_x(r1, (y0, y1), (-dz, 0.0));
    }
    // columns on both levels
    for (x_lo, x_hi, z0, z1) in [(-6.0, r0 - 2.0, 0.0, dz), (r1 + 3.0, b3_end - 2.0, -dz, 0.0)] {
        let mut k = 0u32;
        let mut x = x_lo;
        while x < x_hi {
            for y in [-5.0, 5.0] {
                let yo = y + 0.4 * (k % 3) as f64;
                w.block((x, x + 0.6), (yo - 0.3, yo + 0.3), (z0, z1));
            }
            x += 7.0 + (k % 2) as f64 * 1.5;
            k += 1;
        }
    }
    let profile = Profile {
        ramp: (r0, r1, 0.0, -dz),
        blend: 4.0,
    };
    let poses = profile_poses(&profile, 0.0, b3_end - 8.0, 0.0, p.sensor_height);
    Ok((w, drive(poses, p.speed)?))
}

fn ramp_junction(p: &ScenarioParams) -> Result<(WorldModel, TrajectorySpec)> {
    let slope = 8f64.to_radians();
    let (r0, r1) = (30.0, 60.0);
    let rise = (r1 - r0) * slope.tan();
    let mut w = WorldModel::default();
    // flat road continues on the left, the ramp climbs on the right
    w.horizontal(SurfaceKind::Floor, (-10.0, r0), (-10.0, 10.0), 0.0);
    w.horizontal(SurfaceKind::Floor, (r0, r1 + 40.0), (-10.0, 0.0), 0.0);
    let ramp_c = Vector3::new((r0 + r1) / 2.0, 4.0, rise / 2.0);
    let along = Vector3::new(r1 - r0, 0.0, rise).normalize();
    w.add(SurfaceKind::Ramp, ramp_c, along, Vector3::y(), (r1 - r0) / (2.0 * slope.cos()), 4.0);
    w.horizontal(SurfaceKind::Floor, (r1, r1 + 40.0), (0.0, 8.0), rise);
    w.wall_y(-10.0, (-10.0, r1 + 40.0), (0.0, 6.0));
    w.wall_y(8.0, (r0, r1 + 40.0), (0.0, rise + 6.0));
    w.wall_y(10.0, (-10.0, r0), (0.0, 6.0));
    w.wall_x(-10.0, (-10.0, 10.0), (0.0, 6.0));
    for x in [0.0, 9.0, 17.0, 26.0, 41.0, 55.0, 70.0, 84.0] {
        w.block((x, x + 0.4), (-8.0, -7.6), (0.0, 4.0));
    }
    let profile = Profile {
        ramp: (r0, r1, 0.0, rise),
        blend: 4.0,
    };
    let poses = profile_poses(&profile, 0.0, r1 + 30.0, 4.0, p.sensor_height);
    Ok((w, drive(poses, p.speed)?))
}

/// One frame of the binary scan container.
#[derive(Debug, Clone, PartialEq)]
pub struct ContainerFrame {
    pub index: u32,
    pub timestamp: f64,
    pub points: Vec<[f32; 3]>,
}

/// Per frame: `u32` index, `f64` timestamp, `u32` point count, then
/// `count × 3` `f32` coordinates; all little-endian.
pub fn write_scan_container<W: Write>(mut w: W, frames: &[ContainerFrame]) -> Result<()> {
    for f in frames {
        w.write_all(&f.index.to_le_bytes())?;
        w.write_all(&f.timestamp.to_le_bytes())?;
        let count = u32::try_from(f.points.len()).map_err(|_| Error::InvalidInput("too many points in frame".into()))?;
        w.write_all(&count.to_le_bytes())?;
        for p in &f.points {
            for c in p {
                w.write_all(&c.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_scan_container<R: Read>(mut r: R) -> Result<Vec<ContainerFrame>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut frames = Vec::new();
    let mut at = 0usize;
    let truncated = |at: usize| Error::InvalidInput(format!("scan container truncated at byte {at}"));
    while at < bytes.len() {
        let header = bytes.get(at..at + 16).ok_or_else(|| truncated(at))?;
        let index = u32::from_le_bytes(header[0..4].try_into().unwrap());
        let timestamp = f64::from_le_bytes(header[4..12].try_into().unwrap());
        let count = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        at += 16;
        let body = bytes.get(at..at + count * 12).ok_or_else(|| truncated(at))?;
        let points = body
            .chunks_exact(12)
            .map(|c| {
                [
                    f32::from_le_bytes(c[0..4].try_into().unwrap()),
                    f32::from_le_bytes(c[4..8].try_into().unwrap()),
                    f32::from_le_bytes(c[8..12].try_into().unwrap()),
                ]
            })
            .collect();
        at += count * 12;
        frames.push(ContainerFrame { index, timestamp, points });
    }
    Ok(frames)
}

impl ContainerFrame {
    pub fn from_scan(index: u32, scan: &Scan) -> Self {
        Self {
            index,
            timestamp: scan.timestamp,
            points: scan.points.iter().map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect(),
        }
    }

    /// Back to a scan, attaching the range-aligned covariance model.
    pub fn to_scan(&self, range_sigma: f64) -> Scan {
        let points: Vec<Vector3<f64>> = self
            .points
            .iter()
            .map(|p| Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64))
            .collect();
        Scan {
            per_point_cov: points.iter().map(|p| point_covariance(p, range_sigma)).collect(),
            points,
            timestamp: self.timestamp,
        }
    }
}

/// ASCII PLY with `x y z` vertices.
pub fn write_ply_points<W: Write>(mut w: W, points: &[Vector3<f64>]) -> Result<()> {
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", points.len())?;
    writeln!(w, "property double x\nproperty double y\nproperty double z\nend_header")?;
    for p in points {
        writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
    }
    Ok(())
}
