//! Flat `key = value` configuration shared by the simulator and the pipeline.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::association::CHI2_3DOF_95;
use crate::error::{Error, Result};
use crate::graph::{LmConfig, LoopClosureConfig};
use crate::ground::GroundConfig;
use crate::keyframe::KeyFramePolicy;
use crate::registration::RegistrationConfig;
use crate::sim::{BiasModel, MotionNoise, ScenarioParams, SensorModel};
use crate::sliding_map::{AssociationMetric, MaintenanceConfig};

impl fmt::Display for BiasModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BiasModel::SinSquared => "sin2",
            BiasModel::OneMinusCos => "one_minus_cos",
            BiasModel::ThetaSquared => "theta2",
        })
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

macro_rules! config_struct {
    ($($(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr,)*) => {
        /// Every tunable of the simulator and the pipeline.
        #[derive(Debug, Clone, PartialEq)]
        pub struct PipelineConfig {
            $($(#[doc = $doc])* pub $key: $ty,)*
        }

        impl Default for PipelineConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl PipelineConfig {
            /// Sets one key from its textual value; unknown keys are errors.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => self.$key = parse_value(key, value)?,)*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            /// `(key, value)` pairs in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), self.$key.to_string()),)*]
            }
        }
    };
}

config_struct! {
    /// Root seed; every random stream is derived from it.
    seed: u64 = 1,

    sensor_height: f64 = 1.5,
    range_noise_sigma: f64 = 0.02,
    bias_max: f64 = 0.2,
    bias_model: BiasModel = BiasModel::SinSquared,
    n_beams: usize = 40,
    horizontal_step_deg: f64 = 1.5,
    max_range: f64 = 80.0,
    scan_rate_hz: f64 = 10.0,
    speed: f64 = 10.0,
    prior_noise_rot: f64 = 0.002,
    prior_noise_trans: f64 = 0.05,

    max_corr_dist: f64 = 1.0,
    normal_neighbors: usize = 8,
    normal_radius: f64 = 2.0,
    min_inliers: usize = 50,
    icp_max_iter: usize = 30,
    icp_convergence_eps: f64 = 1e-6,
    cond_floor: f64 = 1e-6,
    /// Voxel size for thinning the registered scan; 0 keeps every point.
    scan_voxel: f64 = 0.3,

    /// Per-frame pose noise added to the registration covariance (rad, m).
    process_noise_rot: f64 = 0.003,
    process_noise_trans: f64 = 0.03,
    /// Seeded perturbation injected into every odometry increment (rad, m).
    odom_noise_rot: f64 = 0.0,
    odom_noise_trans: f64 = 0.0,

    assoc_dist: f64 = 0.3,
    elimination_threshold: f64 = 0.25,
    insert_spacing: f64 = 0.2,
    range_cutoff: f64 = 80.0,
    /// Squared Mahalanobis gate for map association; 0 selects Euclidean.
    mahalanobis_gate: f64 = 0.0,

    keyframe_translation: f64 = 2.0,
    keyframe_rotation_deg: f64 = 15.0,

    ground_box: f64 = 10.0,
    ground_band: f64 = 0.5,
    min_ground_points: usize = 100,
    /// Share of ground candidates the fitted plane has to explain.
    ground_min_support: f64 = 0.7,
    ransac_iterations: usize = 200,
    ransac_inlier_dist: f64 = 0.05,
    wls_max_iter: usize = 20,
    /// Observations tilted further than this from the first ground are ignored.
    ground_tilt_gate_deg: f64 = 5.0,

    gate: f64 = CHI2_3DOF_95,
    /// Isotropic variance added to the plane innovation covariance, m².
    plane_pose_noise: f64 = 0.0025,

    loop_radius: f64 = 5.0,
    loop_min_gap: usize = 20,
    loop_max_rms: f64 = 0.1,
    loop_min_inlier_fraction: f64 = 0.5,
    loop_voxel: f64 = 0.5,
    loop_max_corr_dist: f64 = 2.0,

    lm_initial_lambda: f64 = 1e-4,
    lm_max_iterations: usize = 100,
    lm_relative_tolerance: f64 = 1e-9,
    huber_delta: f64 = 1.0,
}

const STREAM_SENSOR: u64 = 0x5345_4e53;
const STREAM_PRIOR: u64 = 0x5052_494f;
const STREAM_RANSAC: u64 = 0x5241_4e53;
const STREAM_ODOM: u64 = 0x4f44_4f4d;

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                msg: format!("expected `key = value`, found `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sensor_height", self.sensor_height),
            ("horizontal_step_deg", self.horizontal_step_deg),
            ("max_range", self.max_range),
            ("scan_rate_hz", self.scan_rate_hz),
            ("speed", self.speed),
            ("max_corr_dist", self.max_corr_dist),
            ("normal_radius", self.normal_radius),
            ("assoc_dist", self.assoc_dist),
            ("elimination_threshold", self.elimination_threshold),
            ("range_cutoff", self.range_cutoff),
            ("keyframe_translation", self.keyframe_translation),
            ("keyframe_rotation_deg", self.keyframe_rotation_deg),
            ("ground_box", self.ground_box),
            ("ground_band", self.ground_band),
            ("ransac_inlier_dist", self.ransac_inlier_dist),
            ("gate", self.gate),
            ("loop_radius", self.loop_radius),
            ("lm_initial_lambda", self.lm_initial_lambda),
            ("huber_delta", self.huber_delta),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{k}` must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("range_noise_sigma", self.range_noise_sigma),
            ("bias_max", self.bias_max),
            ("prior_noise_rot", self.prior_noise_rot),
            ("prior_noise_trans", self.prior_noise_trans),
            ("scan_voxel", self.scan_voxel),
            ("process_noise_rot", self.process_noise_rot),
            ("process_noise_trans", self.process_noise_trans),
            ("odom_noise_rot", self.odom_noise_rot),
            ("odom_noise_trans", self.odom_noise_trans),
            ("insert_spacing", self.insert_spacing),
            ("mahalanobis_gate", self.mahalanobis_gate),
            ("plane_pose_noise", self.plane_pose_noise),
            ("loop_voxel", self.loop_voxel),
            ("ground_tilt_gate_deg", self.ground_tilt_gate_deg),
        ];
        for (k, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{k}` must be non-negative, got {v}")));
            }
        }
        if self.n_beams == 0 || self.normal_neighbors < 3 || self.min_inliers < 6 {
            return Err(Error::Config("n_beams > 0, normal_neighbors >= 3 and min_inliers >= 6 required".into()));
        }
        for (k, v) in [
            ("loop_min_inlier_fraction", self.loop_min_inlier_fraction),
            ("ground_min_support", self.ground_min_support),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("`{k}` must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    fn stream(&self, tag: u64) -> u64 {
        self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ tag
    }

    pub fn sensor(&self) -> SensorModel {
        SensorModel {
            n_beams_vertical: self.n_beams,
            horizontal_step: self.horizontal_step_deg.to_radians(),
            max_range: self.max_range,
            range_noise_sigma: self.range_noise_sigma,
            bias_max: self.bias_max,
            bias_model: self.bias_model,
            rng_seed: self.stream(STREAM_SENSOR),
            ..SensorModel::default()
        }
    }

    pub fn scenario(&self) -> ScenarioParams {
        ScenarioParams {
            speed: self.speed,
            sensor_height: self.sensor_height,
            ..ScenarioParams::default()
        }
    }

    pub fn prior_noise(&self) -> MotionNoise {
        MotionNoise {
            rot_sigma: self.prior_noise_rot,
            trans_sigma: self.prior_noise_trans,
        }
    }

    pub fn prior_seed(&self) -> u64 {
        self.stream(STREAM_PRIOR)
    }

    pub fn odometry_noise_seed(&self) -> u64 {
        self.stream(STREAM_ODOM)
    }

    pub fn registration(&self) -> RegistrationConfig {
        RegistrationConfig {
            max_corr_dist: self.max_corr_dist,
            normal_neighbors: self.normal_neighbors,
            normal_radius: self.normal_radius,
            min_inliers: self.min_inliers,
            max_iter: self.icp_max_iter,
            convergence_eps: self.icp_convergence_eps,
            cond_floor: self.cond_floor,
        }
    }

    pub fn maintenance(&self) -> MaintenanceConfig {
        MaintenanceConfig {
            assoc_dist: self.assoc_dist,
            metric: if self.mahalanobis_gate > 0.0 {
                AssociationMetric::Mahalanobis {
                    gate: self.mahalanobis_gate,
                }
            } else {
                AssociationMetric::Euclidean
            },
            elimination_threshold: self.elimination_threshold,
            insert_spacing: self.insert_spacing,
        }
    }

    pub fn keyframe_policy(&self) -> KeyFramePolicy {
        KeyFramePolicy {
            min_translation: self.keyframe_translation,
            min_rotation: self.keyframe_rotation_deg.to_radians(),
        }
    }

    pub fn ground(&self) -> GroundConfig {
        GroundConfig {
            box_half_extent: self.ground_box,
            z_band: self.ground_band,
            min_ground_points: self.min_ground_points,
            min_support_fraction: self.ground_min_support,
            ransac_iterations: self.ransac_iterations,
            ransac_inlier_dist: self.ransac_inlier_dist,
            ransac_seed: self.stream(STREAM_RANSAC),
            max_iter: self.wls_max_iter,
            ..GroundConfig::default()
        }
    }

    pub fn loop_closure(&self) -> LoopClosureConfig {
        LoopClosureConfig {
            radius: self.loop_radius,
            min_gap: self.loop_min_gap,
            max_rms: self.loop_max_rms,
            min_inlier_fraction: self.loop_min_inlier_fraction,
            source_voxel: self.loop_voxel,
            refine_corr_dist: self.max_corr_dist,
            registration: RegistrationConfig {
                max_corr_dist: self.loop_max_corr_dist,
                ..self.registration()
            },
        }
    }

    pub fn lm(&self) -> LmConfig {
        LmConfig {
            initial_lambda: self.lm_initial_lambda,
            max_iterations: self.lm_max_iterations,
            relative_tolerance: self.lm_relative_tolerance,
            huber_delta: self.huber_delta,
            ..LmConfig::default()
        }
    }
}
