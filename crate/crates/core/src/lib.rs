//! LiDAR-IMU mapping built on Gaussian voxel map registration and factor
//! graph smoothing.
//!
//! The estimator runs in three stages: a fixed-lag odometry smoother, a
//! local mapper that merges marginalized frames into submaps, and a global
//! mapper that aligns submaps with matching-cost and IMU factors.

pub mod error;
pub mod geometry;
pub mod global_mapping;
pub mod graph;
pub mod imu;
pub mod io;
pub mod local_mapping;
pub mod metrics;
pub mod odometry;
pub mod par;
pub mod pipeline;
pub mod preprocess;
pub mod registration;
pub mod synth;

pub use error::{Error, Result};
