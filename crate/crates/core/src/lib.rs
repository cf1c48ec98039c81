//! Markerless multi-view capture of two closely interacting subjects.
//!
//! The crate covers the whole chain from calibrated cameras and 2D detections
//! to fitted capsule bodies: per-keypoint Kalman forecasting, forecast-gated
//! association, RANSAC triangulation, sequence refinement, collision-aware
//! body fitting, and the evaluation metrics used to score the result.

pub mod body;
pub mod error;
pub mod forecast;
pub mod meshfit;
pub mod metrics;
pub mod geometry;
pub mod observe;
pub mod par;
pub mod pipeline;
pub mod simulate;
pub mod triangulate;

pub use error::{Error, Result};
