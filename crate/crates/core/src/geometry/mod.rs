//! Manifold math shared by every estimator: rotations, rigid transforms,
//! full sensor states and 3-D Gaussians.

mod pose;
pub mod so3;
mod state;

use nalgebra::{Matrix3, Vector3};

pub use pose::Se3Pose;
pub use so3::Rotation;
pub use state::{BiasLimits, SensorState, StateTangent, POSE_DIM, STATE_DIM};

/// A point modeled as a Gaussian distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian3 {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

impl Gaussian3 {
    pub fn new(mean: Vector3<f64>, cov: Matrix3<f64>) -> Self {
        Self { mean, cov }
    }

    /// Pushes the distribution through a rigid transform.
    pub fn transformed(&self, t: &Se3Pose) -> Self {
        let r = t.rotation_matrix();
        Self {
            mean: t.apply(&self.mean),
            cov: r * self.cov * r.transpose(),
        }
    }
}
