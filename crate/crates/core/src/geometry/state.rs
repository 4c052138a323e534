use nalgebra::{Matrix3, SVector, Vector3, Vector6};

use super::pose::Se3Pose;

/// Tangent size of a pose variable.
pub const POSE_DIM: usize = 6;
/// Tangent size of a full sensor state: `[φ, ρ, v, b_a, b_ω]`.
pub const STATE_DIM: usize = 15;

pub type StateTangent = SVector<f64, STATE_DIM>;

/// Pose, world-frame velocity and IMU biases at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorState {
    pub stamp: f64,
    pub pose: Se3Pose,
    pub velocity: Vector3<f64>,
    pub bias_accel: Vector3<f64>,
    pub bias_gyro: Vector3<f64>,
}

impl Default for SensorState {
    fn default() -> Self {
        Self::at_rest(0.0, Se3Pose::identity())
    }
}

/// Bias magnitude limits; estimates beyond these are treated as divergence.
#[derive(Clone, Copy, Debug)]
pub struct BiasLimits {
    pub accel: f64,
    pub gyro: f64,
}

impl Default for BiasLimits {
    fn default() -> Self {
        Self { accel: 1.0, gyro: 0.5 }
    }
}

impl SensorState {
    pub fn at_rest(stamp: f64, pose: Se3Pose) -> Self {
        Self {
            stamp,
            pose,
            velocity: Vector3::zeros(),
            bias_accel: Vector3::zeros(),
            bias_gyro: Vector3::zeros(),
        }
    }

    /// Biases stacked as `[b_a, b_ω]`.
    pub fn bias(&self) -> Vector6<f64> {
        let mut b = Vector6::zeros();
        b.fixed_rows_mut::<3>(0).copy_from(&self.bias_accel);
        b.fixed_rows_mut::<3>(3).copy_from(&self.bias_gyro);
        b
    }

    pub fn with_bias(mut self, bias: &Vector6<f64>) -> Self {
        self.bias_accel = bias.fixed_rows::<3>(0).into_owned();
        self.bias_gyro = bias.fixed_rows::<3>(3).into_owned();
        self
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.pose.rotation_matrix()
    }

    /// Right-multiplicative on the pose, additive on velocity and biases.
    pub fn retract(&self, d: &StateTangent) -> SensorState {
        let xi: Vector6<f64> = d.fixed_rows::<6>(0).into_owned();
        SensorState {
            stamp: self.stamp,
            pose: self.pose.retract(&xi),
            velocity: self.velocity + d.fixed_rows::<3>(6),
            bias_accel: self.bias_accel + d.fixed_rows::<3>(9),
            bias_gyro: self.bias_gyro + d.fixed_rows::<3>(12),
        }
    }

    pub fn local(&self, other: &SensorState) -> StateTangent {
        let mut d = StateTangent::zeros();
        d.fixed_rows_mut::<6>(0).copy_from(&self.pose.local(&other.pose));
        d.fixed_rows_mut::<3>(6).copy_from(&(other.velocity - self.velocity));
        d.fixed_rows_mut::<3>(9)
            .copy_from(&(other.bias_accel - self.bias_accel));
        d.fixed_rows_mut::<3>(12).copy_from(&(other.bias_gyro - self.bias_gyro));
        d
    }

    pub fn is_finite(&self) -> bool {
        self.stamp.is_finite()
            && self.pose.trans.iter().all(|v| v.is_finite())
            && self.pose.rot.coords.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.bias().iter().all(|v| v.is_finite())
    }

    pub fn biases_within(&self, limits: &BiasLimits) -> bool {
        self.bias_accel.norm() <= limits.accel && self.bias_gyro.norm() <= limits.gyro
    }
}
