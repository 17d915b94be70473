//! Stereo visual-inertial state estimation with pose-only visual residuals,
//! online camera-IMU extrinsic calibration, and loop closure against an
//! implicit map (keyframes and 2D keypoints, no 3D landmarks).
//!
//! The crate also ships a synthetic-measurement simulator and trajectory
//! evaluation tooling (ATE, RPE, NEES) so every piece of the estimator is
//! testable at desk scale.

pub mod config;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod loop_closure;
pub mod pipeline;
pub mod propagation;
pub mod simulator;
pub mod state;
pub mod update;
pub mod vision;

pub use error::{Error, Result};
