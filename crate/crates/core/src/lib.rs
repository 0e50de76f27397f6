//! Point-cloud completion from a partial scan and depth maps rendered from it.
//!
//! The pipeline runs in two phases. A coarse stage encodes the partial cloud
//! and its self-projected depth views into a global descriptor and decodes a
//! coarse cloud. Two refinement stages then upsample it, each predicting
//! per-point offsets from an incompleteness-aware self-attention path and a
//! cross-attention path against the partial input.
//!
//! Everything is generic over the scalar type: training runs in `f32`,
//! gradient checks run in `f64`.

pub mod cloud;
pub mod coarse;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pointops;
pub mod refine;
pub mod selfview;
pub mod train;

pub use cloud::PointCloud;
pub use error::{Error, Result};

pub type PointCloud32 = PointCloud<f32>;
pub type PointCloud64 = PointCloud<f64>;
