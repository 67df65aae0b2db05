//! Camera geometry: SE(3) poses, pinhole projection, dense rigid-motion
//! correspondence with analytic Jacobians, and Sim(3) trajectory alignment.
//!
//! Conventions used across the crate:
//!
//! * A pose `G` maps world coordinates into camera coordinates,
//!   `x_cam = G * x_world`.
//! * Tangent vectors are ordered `[translation, rotation]`.
//! * Pose increments act by left multiplication, `G <- exp(delta) * G`.

mod projection;
mod se3;
mod sim3;

pub use projection::{
    backproject, correspondence_jacobians, project, relative_correspondence_jacobians,
    rigid_correspondence, CameraIntrinsics, PixelJacobians, Z_MIN,
};
pub use se3::{se3_exp, se3_interpolate, se3_log, SE3Pose};
pub use sim3::{umeyama_sim3, Sim3Transform};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    /// Rotation magnitude at or beyond pi, where the logarithm branch is
    /// ambiguous.
    #[error("log-singularity: rotation angle {angle} too close to pi")]
    LogSingularity { angle: f64 },

    /// Backprojection asked for a point at nonpositive inverse depth.
    #[error("nonpositive-disparity: inverse depth {disparity} must be > 0")]
    NonpositiveDisparity { disparity: f64 },

    /// Point-set alignment is rank deficient (too few or collinear points).
    #[error("degenerate-alignment: {reason}")]
    DegenerateAlignment { reason: String },
}
