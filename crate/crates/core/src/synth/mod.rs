//! Synthetic datasets with exact ground truth: box worlds, analytic
//! trajectories, a spinning multi-beam LiDAR and an IMU synthesized from the
//! trajectory derivatives.

mod trajectory;
mod world;

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use trajectory::{Kinematics, Motion, Path, SpeedProfile, Wobble};
pub use world::{Aabb, World};

use crate::geometry::{Se3Pose, SensorState};
use crate::imu::{ImuSample, STANDARD_GRAVITY};
use crate::preprocess::{RawScan, TimedPoint};
use crate::{Error, Result};

/// Scene geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorldSpec {
    BoxRoom { size: [f64; 3] },
    RingCorridor { side: f64, width: f64, height: f64 },
    Corridor { length: f64, width: f64, height: f64 },
    Custom { outer: Aabb, obstacles: Vec<Aabb> },
}

impl WorldSpec {
    pub fn build(&self) -> World {
        match self {
            WorldSpec::BoxRoom { size } => World::box_room(*size),
            WorldSpec::RingCorridor { side, width, height } => World::ring_corridor(*side, *width, *height),
            WorldSpec::Corridor { length, width, height } => World::corridor(*length, *width, *height),
            WorldSpec::Custom { outer, obstacles } => World {
                outer: *outer,
                obstacles: obstacles.clone(),
            },
        }
    }
}

/// Planar path followed by the sensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PathSpec {
    Stationary {
        position: [f64; 2],
        yaw: f64,
    },
    Line {
        start: [f64; 2],
        yaw: f64,
        length: f64,
    },
    Circle {
        center: [f64; 2],
        radius: f64,
    },
    SquareLoop {
        center: [f64; 2],
        side: f64,
        corner_radius: f64,
    },
}

impl PathSpec {
    pub fn build(&self) -> Path {
        match self {
            PathSpec::Stationary { position, yaw } => Path::point(Vector2::from(*position), *yaw),
            PathSpec::Line { start, yaw, length } => Path::line(Vector2::from(*start), *yaw, *length),
            PathSpec::Circle { center, radius } => Path::circle(Vector2::from(*center), *radius),
            PathSpec::SquareLoop {
                center,
                side,
                corner_radius,
            } => Path::rounded_square(Vector2::from(*center), *side, *corner_radius),
        }
    }
}

/// Spinning multi-beam LiDAR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LidarSpec {
    pub channels: usize,
    pub min_elevation_deg: f64,
    pub max_elevation_deg: f64,
    /// Firings per revolution.
    pub columns: usize,
    pub min_range: f64,
    pub max_range: f64,
    /// Standard deviation of the range noise (m).
    pub range_noise: f64,
}

impl Default for LidarSpec {
    fn default() -> Self {
        Self {
            channels: 16,
            min_elevation_deg: -15.0,
            max_elevation_deg: 15.0,
            columns: 360,
            min_range: 0.3,
            max_range: 60.0,
            range_noise: 0.0,
        }
    }
}

/// Inertial sensor errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImuSpec {
    /// White noise densities (m/s²/√Hz, rad/s/√Hz).
    pub accel_noise_density: f64,
    pub gyro_noise_density: f64,
    pub accel_bias: [f64; 3],
    pub gyro_bias: [f64; 3],
    pub gravity: f64,
}

impl Default for ImuSpec {
    fn default() -> Self {
        Self {
            accel_noise_density: 0.0,
            gyro_noise_density: 0.0,
            accel_bias: [0.0; 3],
            gyro_bias: [0.0; 3],
            gravity: STANDARD_GRAVITY,
        }
    }
}

impl ImuSpec {
    /// Noise of a consumer-grade MEMS unit with small constant biases.
    pub fn realistic() -> Self {
        Self {
            accel_noise_density: 2e-3,
            gyro_noise_density: 2e-4,
            accel_bias: [0.03, -0.02, 0.04],
            gyro_bias: [2e-3, -1e-3, 1.5e-3],
            gravity: STANDARD_GRAVITY,
        }
    }
}

/// Complete description of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default)]
    pub seed: u64,
    pub frames: usize,
    #[serde(default = "default_scan_rate")]
    pub scan_rate: f64,
    #[serde(default = "default_imu_rate")]
    pub imu_rate: f64,
    /// Sensor height above the floor (m).
    #[serde(default = "default_height")]
    pub height: f64,
    pub world: WorldSpec,
    pub path: PathSpec,
    pub speed: SpeedProfile,
    #[serde(default)]
    pub wobble: Wobble,
    #[serde(default)]
    pub lidar: LidarSpec,
    #[serde(default)]
    pub imu: ImuSpec,
}

fn default_scan_rate() -> f64 {
    10.0
}
fn default_imu_rate() -> f64 {
    200.0
}
fn default_height() -> f64 {
    1.0
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    /// Sensor at rest in a box room.
    pub fn stationary(frames: usize) -> Self {
        Self {
            seed: 0,
            frames,
            scan_rate: 10.0,
            imu_rate: 200.0,
            height: 1.0,
            world: WorldSpec::BoxRoom { size: [10.0, 8.0, 3.0] },
            path: PathSpec::Stationary {
                position: [0.3, -0.2],
                yaw: 0.4,
            },
            speed: SpeedProfile {
                rest: 0.0,
                ramp: 1.0,
                speed: 0.0,
            },
            wobble: Wobble::default(),
            lidar: LidarSpec::default(),
            imu: ImuSpec::default(),
        }
    }

    /// Circle of radius 2 m inside a box room.
    pub fn box_room_circle(frames: usize) -> Self {
        Self {
            path: PathSpec::Circle {
                center: [0.0, 0.0],
                radius: 2.0,
            },
            speed: SpeedProfile {
                rest: 1.0,
                ramp: 1.0,
                speed: 1.0,
            },
            ..Self::stationary(frames)
        }
    }

    /// One lap of a 40 m rounded-square loop through a ring corridor, with
    /// a one-second rest at the start.
    pub fn square_loop(frames: usize) -> Self {
        let corner_radius = 2.0;
        let side = (40.0 + 8.0 * corner_radius - std::f64::consts::TAU * corner_radius) / 4.0;
        Self {
            seed: 7,
            frames,
            scan_rate: 10.0,
            imu_rate: 200.0,
            height: 1.0,
            world: WorldSpec::RingCorridor {
                side,
                width: 3.0,
                height: 3.0,
            },
            path: PathSpec::SquareLoop {
                center: [0.0, 0.0],
                side,
                corner_radius,
            },
            speed: SpeedProfile {
                rest: 1.0,
                ramp: 1.0,
                speed: 2.2,
            },
            wobble: Wobble {
                amplitude: 0.02,
                frequency: 0.4,
            },
            lidar: LidarSpec {
                range_noise: 0.01,
                ..LidarSpec::default()
            },
            imu: ImuSpec::realistic(),
        }
    }

    /// Straight walk down a planar corridor whose ends stay out of range.
    pub fn planar_corridor(frames: usize) -> Self {
        Self {
            seed: 11,
            frames,
            scan_rate: 10.0,
            imu_rate: 200.0,
            height: 1.0,
            world: WorldSpec::Corridor {
                length: 400.0,
                width: 4.0,
                height: 3.0,
            },
            path: PathSpec::Line {
                start: [150.0, 0.0],
                yaw: 0.0,
                length: 200.0,
            },
            speed: SpeedProfile {
                rest: 1.0,
                ramp: 1.0,
                speed: 1.5,
            },
            wobble: Wobble {
                amplitude: 0.02,
                frequency: 0.4,
            },
            lidar: LidarSpec {
                max_range: 40.0,
                range_noise: 0.01,
                ..LidarSpec::default()
            },
            imu: ImuSpec::realistic(),
        }
    }

    pub fn motion(&self) -> Motion {
        Motion {
            path: self.path.build(),
            profile: self.speed,
            height: self.height,
            wobble: self.wobble,
        }
    }

    pub fn duration(&self) -> f64 {
        self.frames as f64 / self.scan_rate
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::GenerationError(m.to_string()));
        if self.frames == 0 {
            return bad("frames must be positive");
        }
        if !(self.scan_rate > 0.0 && self.imu_rate > 0.0) {
            return bad("rates must be positive");
        }
        if self.lidar.channels == 0 || self.lidar.columns == 0 {
            return bad("lidar needs at least one channel and column");
        }
        if !(self.speed.ramp > 0.0 && self.speed.speed >= 0.0 && self.speed.rest >= 0.0) {
            return bad("invalid speed profile");
        }
        Ok(())
    }
}

/// Generated sensor streams and ground truth.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub scans: Vec<RawScan>,
    pub imu: Vec<ImuSample>,
    /// Ground-truth pose at every scan start.
    pub ground_truth: Vec<(f64, Se3Pose)>,
}

/// Synthetic scene ready for sampling.
pub struct Scene {
    pub spec: SceneSpec,
    pub world: World,
    pub motion: Motion,
}

impl Scene {
    pub fn new(spec: SceneSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            world: spec.world.build(),
            motion: spec.motion(),
            spec,
        })
    }

    /// Ground-truth state at `t`, biases included.
    pub fn state_at(&self, t: f64) -> SensorState {
        let k = self.motion.at(t);
        SensorState {
            stamp: t,
            pose: k.pose,
            velocity: k.velocity,
            bias_accel: Vector3::from(self.spec.imu.accel_bias),
            bias_gyro: Vector3::from(self.spec.imu.gyro_bias),
        }
    }

    /// Noise-free IMU reading at `t`, biases included.
    pub fn ideal_imu(&self, t: f64) -> ImuSample {
        let k = self.motion.at(t);
        let g = Vector3::new(0.0, 0.0, -self.spec.imu.gravity);
        let accel = k.pose.rot.inverse() * (k.acceleration - g) + Vector3::from(self.spec.imu.accel_bias);
        let gyro = k.omega_body + Vector3::from(self.spec.imu.gyro_bias);
        ImuSample::new(t, accel, gyro)
    }

    /// Stamps of the scan starts.
    pub fn scan_stamps(&self) -> Vec<f64> {
        (0..self.spec.frames).map(|i| i as f64 / self.spec.scan_rate).collect()
    }

    /// Errors when the sensor leaves free space during the run.
    fn check_inside(&self) -> Result<()> {
        let step = 0.01;
        let n = (self.spec.duration() / step).ceil() as usize + 1;
        for i in 0..=n {
            let t = i as f64 * step;
            let p = self.motion.at(t).pose.trans;
            if !self.world.is_free(&p) {
                return Err(Error::GenerationError(format!(
                    "trajectory leaves free space at t = {t:.2} s, position ({:.2}, {:.2}, {:.2})",
                    p.x, p.y, p.z
                )));
            }
        }
        Ok(())
    }

    /// One revolution starting at `t0`; azimuth sweeps counter-clockwise and
    /// every column is fired at its own stamp from the pose at that stamp.
    pub fn scan(&self, t0: f64, rng: Option<&mut ChaCha8Rng>) -> RawScan {
        let lidar = &self.spec.lidar;
        let period = 1.0 / self.spec.scan_rate;
        let elevations: Vec<f64> = (0..lidar.channels)
            .map(|c| {
                let f = if lidar.channels == 1 {
                    0.5
                } else {
                    c as f64 / (lidar.channels - 1) as f64
                };
                (lidar.min_elevation_deg + f * (lidar.max_elevation_deg - lidar.min_elevation_deg)).to_radians()
            })
            .collect();
        let noise = (lidar.range_noise > 0.0).then(|| Normal::new(0.0, lidar.range_noise).expect("valid sigma"));
        let mut rng = rng;
        let mut points = Vec::with_capacity(lidar.channels * lidar.columns);
        for col in 0..lidar.columns {
            let t = t0 + period * col as f64 / lidar.columns as f64;
            let pose = self.motion.at(t).pose;
            let az = std::f64::consts::TAU * col as f64 / lidar.columns as f64;
            for &el in &elevations {
                let dir_body = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
                let dir_world = pose.rot * dir_body;
                let range = self.world.cast(&pose.trans, &dir_world);
                if !(range >= lidar.min_range && range <= lidar.max_range) {
                    continue;
                }
                let measured = match (&noise, rng.as_deref_mut()) {
                    (Some(n), Some(r)) => range + n.sample(r),
                    _ => range,
                };
                points.push(TimedPoint::new(dir_body * measured, t));
            }
        }
        let end = t0 + period * (lidar.columns - 1) as f64 / lidar.columns as f64;
        RawScan::new(points, t0, end)
    }

    /// Generates every stream; deterministic for a given spec and seed.
    pub fn generate(&self) -> Result<Dataset> {
        self.check_inside()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        let duration = self.spec.duration();

        let imu_spec = &self.spec.imu;
        let acc_sigma = imu_spec.accel_noise_density * self.spec.imu_rate.sqrt();
        let gyro_sigma = imu_spec.gyro_noise_density * self.spec.imu_rate.sqrt();
        let n_imu = (duration * self.spec.imu_rate).ceil() as usize + 2;
        let mut imu = Vec::with_capacity(n_imu);
        for i in 0..n_imu {
            let t = i as f64 / self.spec.imu_rate;
            let mut s = self.ideal_imu(t);
            if acc_sigma > 0.0 {
                s.accel += gaussian3(&mut rng, acc_sigma);
            }
            if gyro_sigma > 0.0 {
                s.gyro += gaussian3(&mut rng, gyro_sigma);
            }
            imu.push(s);
        }

        let stamps = self.scan_stamps();
        let mut scans = Vec::with_capacity(stamps.len());
        let mut ground_truth = Vec::with_capacity(stamps.len());
        for &t in &stamps {
            scans.push(self.scan(t, Some(&mut rng)));
            ground_truth.push((t, self.motion.at(t).pose));
        }
        Ok(Dataset {
            scans,
            imu,
            ground_truth,
        })
    }
}

/// Builds and samples a scene in one call.
pub fn generate(spec: &SceneSpec) -> Result<Dataset> {
    Scene::new(spec.clone())?.generate()
}

fn gaussian3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    let n = Normal::new(0.0, sigma).expect("valid sigma");
    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}
