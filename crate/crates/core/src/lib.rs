//! Ground-constrained LiDAR SLAM.

pub mod association;
pub mod config;
pub mod error;
pub mod graph;
pub mod ground;
pub mod keyframe;
pub mod pipeline;
pub mod plane;
pub mod registration;
pub mod se3;
pub mod sim;
pub mod sliding_map;
pub mod spatial;

pub use error::{Error, Result};
