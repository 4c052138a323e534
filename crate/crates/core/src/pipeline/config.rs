use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::global_mapping::GlobalMappingConfig;
use crate::graph::LmSettings;
use crate::imu::{ImuNoiseParams, STANDARD_GRAVITY};
use crate::local_mapping::LocalMappingConfig;
use crate::odometry::{InitConfig, KeyframePolicy, OdometryConfig};
use crate::preprocess::PreprocessConfig;

/// Every tunable of the pipeline as one flat document.
///
/// Overlap thresholds are fractions in (0, 1); resolutions are meters;
/// noise densities are SI per √Hz.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Voxel size for scan downsampling.
    pub downsample_resolution: f64,
    /// Neighbors per point for covariance estimation.
    pub k_neighbors: usize,
    /// Smallest eigenvalue of the regularized point covariance.
    pub plane_epsilon: f64,
    /// Largest tolerated gap between IMU samples (s).
    pub max_imu_gap: f64,

    /// Voxel size of per-frame Gaussian voxel maps.
    pub frame_voxel_resolution: f64,
    /// Keyframe inserted when overlap with the latest keyframe is below this.
    pub keyframe_insert_overlap: f64,
    /// Keyframes overlapping the latest one less than this are dropped.
    pub keyframe_drop_overlap: f64,
    /// Keyframe budget of the odometry.
    pub max_keyframes: usize,
    /// Preceding frames each new frame is registered against.
    pub recent_frame_links: usize,
    /// Frames in the odometry smoothing window.
    pub smoother_window: usize,
    /// Minimum matched points for a matching-cost factor.
    pub min_inliers: usize,
    /// Rest data needed for initialization (s).
    pub init_duration: f64,
    /// RMS angular rate below which the sensor counts as at rest (rad/s).
    pub init_max_gyro_rms: f64,

    /// Frame inserted into the pending submap when its overlap with the
    /// latest member is below this.
    pub submap_insert_overlap: f64,
    /// Members per submap.
    pub submap_max_frames: usize,
    /// Submap closes when first and latest members overlap less than this.
    pub submap_min_first_last_overlap: f64,
    pub submap_downsample_resolution: f64,
    pub submap_voxel_resolution: f64,

    /// Overlap above which two submaps get a matching-cost factor.
    pub global_factor_overlap_min: f64,
    /// Global optimization cadence in submaps.
    pub global_optimize_every: usize,
    /// Stiffness of endpoint ties.
    pub relative_sigma: f64,
    /// Reject global solutions whose weakest submap translation information
    /// (1/m²) is below this; unset disables the check.
    pub global_degeneracy_threshold: Option<f64>,

    pub accel_noise_density: f64,
    pub gyro_noise_density: f64,
    pub accel_bias_walk: f64,
    pub gyro_bias_walk: f64,
    pub integration_sigma: f64,
    /// Gravity magnitude (m/s²), pointing along −z of the world frame.
    pub gravity: f64,

    pub lm_max_iterations: usize,
    pub lm_initial_lambda: f64,
    pub lm_relative_cost_tolerance: f64,

    /// Use IMU factors in every stage; off gives a LiDAR-only estimator.
    pub use_imu: bool,
    /// Capacity of each inter-stage queue.
    pub queue_capacity: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let pre = PreprocessConfig::default();
        let odo = OdometryConfig::default();
        let local = LocalMappingConfig::default();
        let global = GlobalMappingConfig::default();
        let noise = ImuNoiseParams::default();
        let lm = LmSettings::default();
        Self {
            downsample_resolution: pre.downsample_resolution,
            k_neighbors: pre.k_neighbors,
            plane_epsilon: pre.plane_epsilon,
            max_imu_gap: pre.max_imu_gap,
            frame_voxel_resolution: odo.voxel_resolution,
            keyframe_insert_overlap: odo.keyframes.insert_overlap,
            keyframe_drop_overlap: odo.keyframes.drop_overlap,
            max_keyframes: odo.keyframes.max_keyframes,
            recent_frame_links: odo.recent_frame_links,
            smoother_window: odo.window,
            min_inliers: odo.min_inliers,
            init_duration: odo.init.duration,
            init_max_gyro_rms: odo.init.max_gyro_rms,
            submap_insert_overlap: local.insert_overlap,
            submap_max_frames: local.max_frames,
            submap_min_first_last_overlap: local.min_first_last_overlap,
            submap_downsample_resolution: local.submap_downsample_resolution,
            submap_voxel_resolution: local.submap_voxel_resolution,
            global_factor_overlap_min: global.factor_overlap_min,
            global_optimize_every: global.optimize_every,
            relative_sigma: global.relative_sigma,
            global_degeneracy_threshold: global.degeneracy_threshold,
            accel_noise_density: noise.accel_noise_density,
            gyro_noise_density: noise.gyro_noise_density,
            accel_bias_walk: noise.accel_bias_walk,
            gyro_bias_walk: noise.gyro_bias_walk,
            integration_sigma: noise.integration_sigma,
            gravity: STANDARD_GRAVITY,
            lm_max_iterations: lm.max_iterations,
            lm_initial_lambda: lm.initial_lambda,
            lm_relative_cost_tolerance: lm.relative_cost_tolerance,
            use_imu: true,
            queue_capacity: 16,
        }
    }
}

fn check(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(what.to_string()))
    }
}

fn fraction(x: f64) -> bool {
    x > 0.0 && x < 1.0
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        check(
            self.downsample_resolution > 0.0,
            "downsample_resolution must be positive",
        )?;
        check(self.k_neighbors >= 3, "k_neighbors must be at least 3")?;
        check(
            self.plane_epsilon > 0.0 && self.plane_epsilon < 1.0,
            "plane_epsilon must be in (0, 1)",
        )?;
        check(self.max_imu_gap > 0.0, "max_imu_gap must be positive")?;
        check(
            self.frame_voxel_resolution > 0.0,
            "frame_voxel_resolution must be positive",
        )?;
        check(
            fraction(self.keyframe_insert_overlap),
            "keyframe_insert_overlap must be in (0, 1)",
        )?;
        check(
            fraction(self.keyframe_drop_overlap),
            "keyframe_drop_overlap must be in (0, 1)",
        )?;
        check(
            self.keyframe_drop_overlap < self.keyframe_insert_overlap,
            "keyframe_drop_overlap must be below keyframe_insert_overlap",
        )?;
        check(self.max_keyframes >= 2, "max_keyframes must be at least 2")?;
        check(self.recent_frame_links >= 1, "recent_frame_links must be positive")?;
        check(self.smoother_window >= 1, "smoother_window must be positive")?;
        check(self.init_duration > 0.0, "init_duration must be positive")?;
        check(self.init_max_gyro_rms > 0.0, "init_max_gyro_rms must be positive")?;
        check(
            fraction(self.submap_insert_overlap),
            "submap_insert_overlap must be in (0, 1)",
        )?;
        check(self.submap_max_frames >= 1, "submap_max_frames must be positive")?;
        check(
            fraction(self.submap_min_first_last_overlap),
            "submap_min_first_last_overlap must be in (0, 1)",
        )?;
        check(
            self.submap_downsample_resolution > 0.0,
            "submap_downsample_resolution must be positive",
        )?;
        check(
            self.submap_voxel_resolution > 0.0,
            "submap_voxel_resolution must be positive",
        )?;
        check(
            fraction(self.global_factor_overlap_min),
            "global_factor_overlap_min must be in (0, 1)",
        )?;
        check(
            self.global_optimize_every >= 1,
            "global_optimize_every must be positive",
        )?;
        check(self.relative_sigma > 0.0, "relative_sigma must be positive")?;
        check(
            self.global_degeneracy_threshold.is_none_or(|t| t >= 0.0),
            "global_degeneracy_threshold must be non-negative",
        )?;
        for (v, name) in [
            (self.accel_noise_density, "accel_noise_density"),
            (self.gyro_noise_density, "gyro_noise_density"),
            (self.accel_bias_walk, "accel_bias_walk"),
            (self.gyro_bias_walk, "gyro_bias_walk"),
            (self.integration_sigma, "integration_sigma"),
        ] {
            check(v > 0.0, &format!("{name} must be positive"))?;
        }
        check(self.gravity > 0.0, "gravity must be positive")?;
        check(self.lm_max_iterations >= 1, "lm_max_iterations must be positive")?;
        check(self.lm_initial_lambda > 0.0, "lm_initial_lambda must be positive")?;
        check(
            self.lm_relative_cost_tolerance >= 0.0,
            "lm_relative_cost_tolerance must be non-negative",
        )?;
        check(self.queue_capacity >= 1, "queue_capacity must be positive")
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            downsample_resolution: self.downsample_resolution,
            k_neighbors: self.k_neighbors,
            plane_epsilon: self.plane_epsilon,
            max_imu_gap: self.max_imu_gap,
        }
    }

    pub fn noise(&self) -> ImuNoiseParams {
        ImuNoiseParams {
            accel_noise_density: self.accel_noise_density,
            gyro_noise_density: self.gyro_noise_density,
            accel_bias_walk: self.accel_bias_walk,
            gyro_bias_walk: self.gyro_bias_walk,
            integration_sigma: self.integration_sigma,
            gravity: Vector3::new(0.0, 0.0, -self.gravity),
        }
    }

    pub fn lm(&self) -> LmSettings {
        LmSettings {
            max_iterations: self.lm_max_iterations,
            initial_lambda: self.lm_initial_lambda,
            relative_cost_tolerance: self.lm_relative_cost_tolerance,
            ..LmSettings::default()
        }
    }

    pub fn odometry(&self) -> OdometryConfig {
        OdometryConfig {
            keyframes: KeyframePolicy {
                insert_overlap: self.keyframe_insert_overlap,
                drop_overlap: self.keyframe_drop_overlap,
                max_keyframes: self.max_keyframes,
            },
            recent_frame_links: self.recent_frame_links,
            window: self.smoother_window,
            voxel_resolution: self.frame_voxel_resolution,
            min_inliers: self.min_inliers,
            preprocess: self.preprocess(),
            noise: self.noise(),
            init: InitConfig {
                duration: self.init_duration,
                max_gyro_rms: self.init_max_gyro_rms,
            },
            lm: self.lm(),
            use_imu_factors: self.use_imu,
            ..OdometryConfig::default()
        }
    }

    pub fn local_mapping(&self) -> LocalMappingConfig {
        LocalMappingConfig {
            insert_overlap: self.submap_insert_overlap,
            max_frames: self.submap_max_frames,
            min_first_last_overlap: self.submap_min_first_last_overlap,
            frame_voxel_resolution: self.frame_voxel_resolution,
            submap_downsample_resolution: self.submap_downsample_resolution,
            submap_voxel_resolution: self.submap_voxel_resolution,
            preprocess: self.preprocess(),
            noise: self.noise(),
            lm: self.lm(),
            use_imu_factors: self.use_imu,
            ..LocalMappingConfig::default()
        }
    }

    pub fn global_mapping(&self) -> GlobalMappingConfig {
        GlobalMappingConfig {
            factor_overlap_min: self.global_factor_overlap_min,
            optimize_every: self.global_optimize_every,
            relative_sigma: self.relative_sigma,
            degeneracy_threshold: self.global_degeneracy_threshold,
            noise: self.noise(),
            max_imu_gap: self.max_imu_gap,
            lm: self.lm(),
            use_imu_factors: self.use_imu,
            ..GlobalMappingConfig::default()
        }
    }
}
