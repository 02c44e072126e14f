//! Keyframe discovery on demonstration trajectories.

use thiserror::Error;

use crate::codec::ActionVector;
use crate::geometry::RgbdFrame;

pub const DEFAULT_VEL_EPS: f64 = 1e-3;
pub const DEFAULT_MIN_GAP: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum KeypointError {
    #[error("trajectory needs at least 2 steps, got {0}")]
    TooShort(usize),
    #[error("step {0} has a non-finite or negative velocity")]
    BadVelocity(usize),
    #[error("step {step} has {count} frames; expected 0 or 4")]
    FrameCount { step: usize, count: usize },
    #[error("invalid setting: {0}")]
    InvalidSetting(String),
}

/// One time step of a demonstration.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    /// The four fixed-camera observations, or none for observation-free
    /// trajectories used in keyframe analysis.
    pub frames: Vec<RgbdFrame>,
    pub action: ActionVector,
    pub joint_velocity_norm: f64,
    pub gripper_open: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub instruction: String,
}

impl Trajectory {
    pub fn new(steps: Vec<Step>, instruction: impl Into<String>) -> Result<Self, KeypointError> {
        let t = Self { steps, instruction: instruction.into() };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), KeypointError> {
        if self.steps.len() < 2 {
            return Err(KeypointError::TooShort(self.steps.len()));
        }
        for (i, s) in self.steps.iter().enumerate() {
            if !(s.joint_velocity_norm.is_finite() && s.joint_velocity_norm >= 0.0) {
                return Err(KeypointError::BadVelocity(i));
            }
            if !(s.frames.is_empty() || s.frames.len() == 4) {
                return Err(KeypointError::FrameCount { step: i, count: s.frames.len() });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn gripper_states(&self) -> Vec<bool> {
        self.steps.iter().map(|s| s.gripper_open).collect()
    }

    pub fn velocities(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.joint_velocity_norm).collect()
    }
}

pub fn extract_keypoints(traj: &Trajectory, vel_eps: f64, min_gap: usize) -> Result<Vec<usize>, KeypointError> {
    traj.validate()?;
    keypoints_from_signals(&traj.gripper_states(), &traj.velocities(), vel_eps, min_gap)
}

/// Selects keyframes from per-step gripper state and velocity.
///
/// Gripper toggles are placed first (earlier toggle wins inside `min_gap`),
/// then near-zero-velocity steps are added in order when they are at least
/// `min_gap` away from every kept index. The final step is always kept and is
/// exempt from the gap rule.
pub fn keypoints_from_signals(gripper_open: &[bool], velocity: &[f64], vel_eps: f64, min_gap: usize) -> Result<Vec<usize>, KeypointError> {
    let n = gripper_open.len();
    if n < 2 {
        return Err(KeypointError::TooShort(n));
    }
    if velocity.len() != n {
        return Err(KeypointError::InvalidSetting("gripper and velocity signals differ in length".into()));
    }
    if !(vel_eps > 0.0) || min_gap < 1 {
        return Err(KeypointError::InvalidSetting(format!("vel_eps ({vel_eps}) must be > 0 and min_gap ({min_gap}) >= 1")));
    }
    let last = n - 1;
    let mut kept: Vec<usize> = Vec::new();
    for i in 1..last {
        if gripper_open[i] != gripper_open[i - 1] && kept.last().is_none_or(|&k| i - k >= min_gap) {
            kept.push(i);
        }
    }
    let toggles = kept.clone();
    for (i, &v) in velocity.iter().enumerate().take(last) {
        if v < vel_eps && kept.iter().all(|&k| k.abs_diff(i) >= min_gap) {
            kept.push(i);
        }
    }
    debug_assert!(toggles.iter().all(|t| kept.contains(t)));
    kept.sort_unstable();
    kept.push(last);
    Ok(kept)
}
