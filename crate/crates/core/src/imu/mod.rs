//! IMU state propagation, preintegration between two stamps and the
//! preintegrated-motion factor.
//!
//! Integration is first-order Euler with zero-order hold: the measurement at
//! the start of each interval drives the whole interval.

mod factor;
mod preintegration;

use nalgebra::Vector3;

pub use factor::{imu_factor_residual, ImuFactor, ImuResidual};
pub use preintegration::{
    correct_for_bias, integration_nodes, preintegrate, BiasCorrected, PreintegratedImu, Preintegrator,
    DEFAULT_REINTEGRATION_THRESHOLD,
};

use crate::geometry::{so3, SensorState};

pub const STANDARD_GRAVITY: f64 = 9.80665;

/// One accelerometer/gyroscope reading in the body frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub stamp: f64,
    /// Specific force (m/s²).
    pub accel: Vector3<f64>,
    /// Angular rate (rad/s).
    pub gyro: Vector3<f64>,
}

impl ImuSample {
    pub fn new(stamp: f64, accel: Vector3<f64>, gyro: Vector3<f64>) -> Self {
        Self { stamp, accel, gyro }
    }

    /// Linear interpolation between two samples; exact at both ends.
    pub fn lerp(a: &ImuSample, b: &ImuSample, t: f64) -> ImuSample {
        if t <= a.stamp {
            return ImuSample { stamp: t, ..*a };
        }
        if t >= b.stamp {
            return ImuSample { stamp: t, ..*b };
        }
        let s = (t - a.stamp) / (b.stamp - a.stamp);
        ImuSample {
            stamp: t,
            accel: a.accel + (b.accel - a.accel) * s,
            gyro: a.gyro + (b.gyro - a.gyro) * s,
        }
    }
}

/// Sensor noise model and gravity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuNoiseParams {
    /// Accelerometer white noise density (m/s²/√Hz).
    pub accel_noise_density: f64,
    /// Gyroscope white noise density (rad/s/√Hz).
    pub gyro_noise_density: f64,
    /// Accelerometer bias random walk (m/s³/√Hz).
    pub accel_bias_walk: f64,
    /// Gyroscope bias random walk (rad/s²/√Hz).
    pub gyro_bias_walk: f64,
    /// Position integration noise (m/√s); keeps short windows full rank.
    pub integration_sigma: f64,
    pub gravity: Vector3<f64>,
}

impl Default for ImuNoiseParams {
    fn default() -> Self {
        Self {
            accel_noise_density: 1e-2,
            gyro_noise_density: 1e-3,
            accel_bias_walk: 1e-3,
            gyro_bias_walk: 1e-4,
            integration_sigma: 1e-4,
            gravity: Vector3::new(0.0, 0.0, -STANDARD_GRAVITY),
        }
    }
}

/// Saturation limits of the sensor.
#[derive(Clone, Copy, Debug)]
pub struct ImuLimits {
    pub accel: f64,
    pub gyro: f64,
}

impl Default for ImuLimits {
    fn default() -> Self {
        Self {
            accel: 160.0,
            gyro: 35.0,
        }
    }
}

impl ImuLimits {
    pub fn admits(&self, s: &ImuSample) -> bool {
        s.accel.norm() < self.accel && s.gyro.norm() < self.gyro
    }
}

/// Advances a state by one measurement over `dt` seconds.
///
/// The right-hand sides use the rotation and velocity from before the update.
pub fn propagate_state(state: &SensorState, sample: &ImuSample, dt: f64, gravity: &Vector3<f64>) -> SensorState {
    debug_assert!(dt > 0.0);
    let r = state.pose.rot;
    let acc_world = r * (sample.accel - state.bias_accel);
    let mut rot = r * so3::exp(&((sample.gyro - state.bias_gyro) * dt));
    rot.renormalize();
    let mut out = *state;
    out.stamp = state.stamp + dt;
    out.pose.rot = rot;
    out.pose.trans = state.pose.trans + state.velocity * dt + 0.5 * gravity * dt * dt + 0.5 * acc_world * dt * dt;
    out.velocity = state.velocity + gravity * dt + acc_world * dt;
    out
}

/// Propagates `state` (at its own stamp) to `t_end` through the samples.
pub fn propagate_through(
    state: &SensorState,
    samples: &[ImuSample],
    t_end: f64,
    gravity: &Vector3<f64>,
    max_gap: f64,
) -> crate::Result<SensorState> {
    if t_end <= state.stamp {
        return Ok(*state);
    }
    let nodes = integration_nodes(samples, state.stamp, t_end, max_gap)?;
    let mut s = *state;
    for w in nodes.windows(2) {
        s = propagate_state(&s, &w[0], w[1].stamp - w[0].stamp, gravity);
    }
    s.stamp = t_end;
    Ok(s)
}
