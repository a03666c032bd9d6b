//! Planar six-joint finger.
//!
//! Angles are absolute: each `theta[i]` is measured against the world x-axis,
//! not against the previous segment. The first stationary joint sits at the
//! base pose origin.

use serde::{Deserialize, Serialize};

pub const JOINTS: usize = 6;
pub const SEGMENTS: usize = 7;

/// Absolute joint angles in degrees.
pub type AngleVector = [f64; JOINTS];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasePose {
    pub x: f64,
    pub y: f64,
    /// Rotation of the finger frame against the world frame, degrees.
    pub heading: f64,
}

impl Default for BasePose {
    fn default() -> Self {
        Self { x: 0.0, y: 0.0, heading: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FingerGeometry {
    /// Segment lengths in mm. Segment 0 is the stationary base; segment
    /// `i + 1` follows joint `i`.
    pub segment_lengths: [f64; SEGMENTS],
    #[serde(default)]
    pub base_pose: BasePose,
    /// Mechanical range of every joint, degrees.
    #[serde(default = "default_range")]
    pub theta_range: (f64, f64),
}

fn default_range() -> (f64, f64) {
    (0.0, 120.0)
}

impl Default for FingerGeometry {
    fn default() -> Self {
        Self { segment_lengths: [20.0; SEGMENTS], base_pose: BasePose::default(), theta_range: default_range() }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum KinematicsError {
    #[error("non-finite angle at joint {0}")]
    NonFinite(usize),
    #[error("invalid geometry: {0}")]
    Geometry(String),
}

impl FingerGeometry {
    pub fn validate(&self) -> Result<(), KinematicsError> {
        if let Some(i) = self.segment_lengths.iter().position(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(KinematicsError::Geometry(format!("segment {i} length must be > 0")));
        }
        let (lo, hi) = self.theta_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(KinematicsError::Geometry(format!("theta range [{lo}, {hi}] is empty")));
        }
        let b = self.base_pose;
        if !(b.x.is_finite() && b.y.is_finite() && b.heading.is_finite()) {
            return Err(KinematicsError::Geometry("base pose must be finite".into()));
        }
        Ok(())
    }

    pub fn in_range(&self, angles: &AngleVector) -> bool {
        angles.iter().all(|t| (self.theta_range.0..=self.theta_range.1).contains(t))
    }
}

/// Joint positions in mm, base joint first, last joint at index 6.
pub type JointPositions = [[f64; 2]; JOINTS + 1];

pub fn forward_kinematics(angles: &AngleVector, geom: &FingerGeometry) -> Result<JointPositions, KinematicsError> {
    if let Some(i) = angles.iter().position(|t| !t.is_finite()) {
        return Err(KinematicsError::NonFinite(i));
    }
    let b = geom.base_pose;
    let mut p = [[b.x, b.y]; JOINTS + 1];
    for i in 0..JOINTS {
        let a = (angles[i] + b.heading).to_radians();
        let l = geom.segment_lengths[i + 1];
        p[i + 1] = [p[i][0] + l * a.cos(), p[i][1] + l * a.sin()];
    }
    Ok(p)
}

/// Distance in mm between the last joints of the two poses.
pub fn accumulative_error(pred: &AngleVector, truth: &AngleVector, geom: &FingerGeometry) -> Result<f64, KinematicsError> {
    let a = forward_kinematics(pred, geom)?[JOINTS];
    let b = forward_kinematics(truth, geom)?[JOINTS];
    Ok((a[0] - b[0]).hypot(a[1] - b[1]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleErrorSummary {
    pub per_joint_abs_err: AngleVector,
    pub sum_abs_err: f64,
    pub max_abs_err: f64,
}

impl AngleErrorSummary {
    /// All six joints within `tol` degrees.
    pub fn within(&self, tol: f64) -> bool {
        self.max_abs_err <= tol
    }
}

pub fn angle_error_summary(pred: &AngleVector, truth: &AngleVector) -> AngleErrorSummary {
    let mut e = [0.0; JOINTS];
    for i in 0..JOINTS {
        e[i] = (pred[i] - truth[i]).abs();
    }
    AngleErrorSummary { per_joint_abs_err: e, sum_abs_err: e.iter().sum(), max_abs_err: e.iter().cloned().fold(0.0, f64::max) }
}
