use nalgebra::{Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{Se3Pose, SensorState};
use crate::imu::ImuSample;

/// Rest-period requirements for bootstrapping.
#[derive(Clone, Copy, Debug)]
pub struct InitConfig {
    /// Seconds of IMU data needed before the first scan.
    pub duration: f64,
    /// Largest RMS angular rate accepted as "at rest" (rad/s).
    pub max_gyro_rms: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            duration: 0.5,
            max_gyro_rms: 0.05,
        }
    }
}

/// Estimates the state at `stamp` from the samples of the preceding rest
/// window: roll and pitch from the mean specific force, yaw zero, velocity
/// zero, gyro bias from the mean rate and accelerometer bias from the
/// specific-force magnitude excess.
///
/// Returns `ImuCoverageGap` while the window is not yet fully covered.
pub fn initialize(imu: &[ImuSample], stamp: f64, gravity_norm: f64, config: &InitConfig) -> Result<SensorState> {
    let start = stamp - config.duration;
    let covers = imu.first().is_some_and(|s| s.stamp <= start + 1e-9);
    if !covers {
        let gap = imu.first().map_or(config.duration, |s| s.stamp - start);
        return Err(Error::ImuCoverageGap { at: start, gap });
    }
    let window: Vec<&ImuSample> = imu.iter().filter(|s| s.stamp >= start && s.stamp <= stamp).collect();
    if window.is_empty() {
        return Err(Error::ImuCoverageGap {
            at: start,
            gap: config.duration,
        });
    }
    let n = window.len() as f64;
    let mean_acc = window.iter().map(|s| s.accel).sum::<Vector3<f64>>() / n;
    let mean_gyro = window.iter().map(|s| s.gyro).sum::<Vector3<f64>>() / n;
    let gyro_rms = (window.iter().map(|s| s.gyro.norm_squared()).sum::<f64>() / n).sqrt();
    if gyro_rms >= config.max_gyro_rms {
        return Err(Error::InitializationMotion { gyro_norm: gyro_rms });
    }

    let roll = mean_acc.y.atan2(mean_acc.z);
    let pitch = (-mean_acc.x).atan2((mean_acc.y.powi(2) + mean_acc.z.powi(2)).sqrt());
    let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_euler_angles(roll, pitch, 0.0));
    let bias_accel = mean_acc.normalize() * (mean_acc.norm() - gravity_norm);

    Ok(SensorState {
        stamp,
        pose: Se3Pose::new(rot, Vector3::zeros()),
        velocity: Vector3::zeros(),
        bias_accel,
        bias_gyro: mean_gyro,
    })
}
