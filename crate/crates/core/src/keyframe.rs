//! Key-frames: snapshots of the sliding map at selected poses.

use crate::ground::GroundObservation;
use crate::se3::Pose;
use crate::sliding_map::SlidingMap;

#[derive(Debug, Clone, PartialEq)]
pub struct KeyFrame {
    pub id: usize,
    /// Index of the scan this key-frame was taken at.
    pub frame_index: usize,
    pub timestamp: f64,
    /// Sensor pose in the world frame at creation time.
    pub pose: Pose,
    /// Sliding map in this key-frame's sensor frame.
    pub local_map: SlidingMap,
    pub ground: Option<GroundObservation>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyFramePolicy {
    pub min_translation: f64,
    /// Radians.
    pub min_rotation: f64,
}

impl Default for KeyFramePolicy {
    fn default() -> Self {
        Self {
            min_translation: 2.0,
            min_rotation: 15f64.to_radians(),
        }
    }
}

/// `true` for the first frame, or once the motion since the last key-frame
/// exceeds either threshold.
pub fn should_create_keyframe(last_kf_pose: Option<&Pose>, current_pose: &Pose, policy: &KeyFramePolicy) -> bool {
    let Some(last) = last_kf_pose else {
        return true;
    };
    let rel = last.inverse().compose(current_pose);
    rel.translation.norm() > policy.min_translation || rel.rotation_angle() > policy.min_rotation
}
