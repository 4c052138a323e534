//! Frontend estimator: fixed-lag smoothing over the latest frames with
//! IMU and matching-cost factors, plus overlap-driven keyframes.

mod init;
mod keyframes;

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::DVector;

pub use init::{initialize, InitConfig};
pub use keyframes::{keyframe_score, removal_candidate, Keyframe, KeyframePolicy, KeyframeRemoval, KeyframeSet};

use crate::error::{Error, Result};
use crate::geometry::{SensorState, STATE_DIM};
use crate::graph::{marginal_covariance, marginalize, optimize_lm, FactorGraph, Key, LmSettings, PriorFactor, Value};
use crate::imu::{preintegrate, propagate_through, ImuFactor, ImuNoiseParams, ImuSample};
use crate::preprocess::{deskew, estimate_covariances, prepare_frame, Frame, PreprocessConfig, RawScan};
use crate::registration::{matching_cost, GaussianVoxelMap, MatchingCostFactor, DEFAULT_MIN_INLIERS};

#[derive(Clone, Debug)]
pub struct OdometryConfig {
    pub keyframes: KeyframePolicy,
    /// Number of preceding frames each new frame is registered against.
    pub recent_frame_links: usize,
    /// Frames kept in the smoothing window.
    pub window: usize,
    pub voxel_resolution: f64,
    pub min_inliers: usize,
    pub preprocess: PreprocessConfig,
    pub noise: ImuNoiseParams,
    pub init: InitConfig,
    pub lm: LmSettings,
    pub use_imu_factors: bool,
    pub use_matching_factors: bool,
    /// Prior strength on the first frame's pose (information per axis).
    pub gauge_information: f64,
    pub initial_velocity_sigma: f64,
    pub initial_accel_bias_sigma: f64,
    pub initial_gyro_bias_sigma: f64,
    /// Keep a log of score-based keyframe removals.
    pub record_keyframe_removals: bool,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        Self {
            keyframes: KeyframePolicy::default(),
            recent_frame_links: 3,
            window: 5,
            voxel_resolution: 0.5,
            min_inliers: DEFAULT_MIN_INLIERS,
            preprocess: PreprocessConfig::default(),
            noise: ImuNoiseParams::default(),
            init: InitConfig::default(),
            lm: LmSettings::default(),
            use_imu_factors: true,
            use_matching_factors: true,
            gauge_information: 1e6,
            initial_velocity_sigma: 0.01,
            initial_accel_bias_sigma: 0.1,
            initial_gyro_bias_sigma: 0.01,
            record_keyframe_removals: false,
        }
    }
}

impl OdometryConfig {
    pub fn validate(&self) -> Result<()> {
        let k = &self.keyframes;
        if !(0.0 < k.drop_overlap && k.drop_overlap < k.insert_overlap && k.insert_overlap < 1.0) {
            return Err(Error::Config(
                "keyframe overlaps must satisfy 0 < drop < insert < 1".into(),
            ));
        }
        if k.max_keyframes < 2 {
            return Err(Error::Config("at least two keyframes are required".into()));
        }
        if self.window == 0 || self.recent_frame_links == 0 {
            return Err(Error::Config("window and frame links must be positive".into()));
        }
        if !self.use_imu_factors && !self.use_matching_factors {
            return Err(Error::Config("at least one factor type must be enabled".into()));
        }
        Ok(())
    }
}

/// A frame leaving the smoothing window, handed to local mapping.
#[derive(Clone, Debug)]
pub struct MarginalizedFrame {
    pub id: usize,
    /// Points before deskewing, with neighbor lists, for re-deskewing.
    pub raw: Arc<Frame>,
    /// IMU samples from the previous frame's stamp to past this scan's end.
    pub imu: Vec<ImuSample>,
    pub state: SensorState,
    /// Marginal variances of `[v, b_a, b_ω]` at marginalization time.
    pub velocity_bias_variance: [f64; 9],
}

/// Per-frame result.
#[derive(Clone, Debug)]
pub struct FrameEstimate {
    pub id: usize,
    pub state: SensorState,
    pub is_keyframe: bool,
    /// Optimization failed and the IMU prediction was kept.
    pub degraded: bool,
    pub elapsed: Duration,
    pub factors: usize,
    /// Optimizer iterations spent on this frame.
    pub iterations: usize,
}

struct WindowFrame {
    id: usize,
    prev_stamp: f64,
    raw: Arc<Frame>,
    frame: Arc<Frame>,
    voxelmap: Arc<GaussianVoxelMap>,
}

pub struct Odometry {
    config: OdometryConfig,
    imu: Vec<ImuSample>,
    graph: FactorGraph,
    window: VecDeque<WindowFrame>,
    keyframes: KeyframeSet,
    next_id: usize,
    last_state: Option<SensorState>,
    last_stamp: f64,
}

impl Odometry {
    pub fn new(config: OdometryConfig) -> Result<Self> {
        config.validate()?;
        let mut keyframes = KeyframeSet::default();
        keyframes.record_removals = config.record_keyframe_removals;
        Ok(Self {
            config,
            imu: Vec::new(),
            graph: FactorGraph::new(),
            window: VecDeque::new(),
            keyframes,
            next_id: 0,
            last_state: None,
            last_stamp: f64::NEG_INFINITY,
        })
    }

    pub fn config(&self) -> &OdometryConfig {
        &self.config
    }

    pub fn keyframes(&self) -> &KeyframeSet {
        &self.keyframes
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    pub fn is_initialized(&self) -> bool {
        self.last_state.is_some()
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn push_imu(&mut self, sample: ImuSample) -> Result<()> {
        if let Some(last) = self.imu.last() {
            if sample.stamp <= last.stamp {
                return Err(Error::OutOfOrder(format!(
                    "IMU sample at {} after {}",
                    sample.stamp, last.stamp
                )));
            }
        }
        self.imu.push(sample);
        Ok(())
    }

    /// Downsamples and processes a raw scan.
    pub fn process_scan(&mut self, scan: &RawScan) -> Result<Option<(FrameEstimate, Vec<MarginalizedFrame>)>> {
        let frame = prepare_frame(scan, &self.config.preprocess)?;
        self.process_frame(frame)
    }

    /// Runs one smoothing step for a downsampled, neighbor-annotated frame.
    ///
    /// Returns `None` while waiting for enough rest data to initialize.
    pub fn process_frame(&mut self, frame: Frame) -> Result<Option<(FrameEstimate, Vec<MarginalizedFrame>)>> {
        let started = Instant::now();
        if frame.stamp <= self.last_stamp {
            return Err(Error::OutOfOrder(format!(
                "scan at {} after {}",
                frame.stamp, self.last_stamp
            )));
        }
        let cfg = self.config.clone();
        let gravity = cfg.noise.gravity;
        let max_gap = cfg.preprocess.max_imu_gap;

        let prev = self.last_state;
        let prediction = match prev {
            None => match initialize(&self.imu, frame.stamp, gravity.norm(), &cfg.init) {
                Ok(s) => s,
                Err(Error::ImuCoverageGap { .. }) => {
                    log::debug!("dropping scan at {} while waiting for IMU rest data", frame.stamp);
                    return Ok(None);
                }
                Err(e) => return Err(e),
            },
            Some(p) => propagate_through(&p, &self.imu, frame.stamp, &gravity, max_gap)?,
        };
        self.last_stamp = frame.stamp;

        let raw = Arc::new(frame);
        let deskewed = deskew(&raw, &self.imu, &prediction, &gravity, max_gap)?;
        let deskewed = Arc::new(estimate_covariances(deskewed, cfg.preprocess.plane_epsilon)?);
        let voxelmap = Arc::new(GaussianVoxelMap::build(&deskewed, cfg.voxel_resolution));

        let id = self.next_id;
        self.next_id += 1;
        let key = Key::frame(id);
        self.graph.add_variable(key, Value::State(prediction))?;

        match prev {
            None => self.add_initial_prior(key, &prediction)?,
            Some(p) => {
                let prev_key = Key::frame(id - 1);
                if cfg.use_imu_factors {
                    let samples = self.samples_between(p.stamp, frame_end(&raw));
                    let pre = preintegrate(&samples, p.stamp, prediction.stamp, &p.bias(), &cfg.noise, max_gap)?;
                    self.graph
                        .add_factor(ImuFactor::new(prev_key, key, pre, cfg.noise).with_samples(samples, max_gap))?;
                } else {
                    self.add_motion_prior(key, &prediction)?;
                }
                if cfg.use_matching_factors {
                    self.add_matching_factors(id, &deskewed, &prediction)?;
                }
            }
        }

        let mut degraded = false;
        let mut iterations = 0;
        match optimize_lm(&self.graph, &cfg.lm) {
            Ok(res) => {
                iterations = res.iterations;
                self.graph.set_values(res.values);
            }
            Err(Error::NotConverged { cost, .. }) => {
                log::warn!("frame {id}: optimizer did not converge (cost {cost:.3e}); keeping prediction");
                degraded = true;
            }
            Err(e) => return Err(e),
        }

        let mut state = *self.graph.values().state(&key)?;
        if !cfg.use_imu_factors {
            if let Some(p) = prev {
                // Without IMU factors velocity is unobservable; use the pose
                // difference for the next prediction.
                state.velocity = (state.pose.trans - p.pose.trans) / (state.stamp - p.stamp);
                self.graph.update_value(key, Value::State(state))?;
            }
        }

        self.window.push_back(WindowFrame {
            id,
            prev_stamp: prev.map_or(prediction.stamp, |p| p.stamp),
            raw,
            frame: deskewed.clone(),
            voxelmap: voxelmap.clone(),
        });

        let values = self.graph.values().clone();
        self.keyframes
            .refresh_states(|kid| values.state(&Key::frame(kid)).ok().copied());
        let is_keyframe = self.keyframes.update(
            Keyframe {
                id,
                frame: deskewed,
                voxelmap,
                state,
                marginalized: false,
            },
            &cfg.keyframes,
        );

        let factors = self.graph.num_factors();
        let mut emitted = Vec::new();
        while self.window.len() > cfg.window {
            emitted.push(self.marginalize_oldest()?);
        }
        self.last_state = Some(state);
        self.trim_imu();

        Ok(Some((
            FrameEstimate {
                id,
                state,
                is_keyframe,
                degraded,
                elapsed: started.elapsed(),
                factors,
                iterations,
            },
            emitted,
        )))
    }

    /// Marginalizes every remaining frame, oldest first.
    pub fn finish(&mut self) -> Result<Vec<MarginalizedFrame>> {
        let mut out = Vec::new();
        while !self.window.is_empty() {
            out.push(self.marginalize_oldest()?);
        }
        Ok(out)
    }

    fn add_initial_prior(&mut self, key: Key, state: &SensorState) -> Result<()> {
        let c = &self.config;
        let mut info = [0.0; STATE_DIM];
        info[..6].fill(c.gauge_information);
        info[6..9].fill(c.initial_velocity_sigma.powi(-2));
        info[9..12].fill(c.initial_accel_bias_sigma.powi(-2));
        info[12..15].fill(c.initial_gyro_bias_sigma.powi(-2));
        self.graph
            .add_factor(PriorFactor::diagonal(key, Value::State(*state), &info))
    }

    /// Weak velocity/bias prior used when IMU factors are disabled.
    fn add_motion_prior(&mut self, key: Key, state: &SensorState) -> Result<()> {
        let c = &self.config;
        let mut info = [0.0; STATE_DIM];
        info[6..9].fill(1.0);
        info[9..12].fill(c.initial_accel_bias_sigma.powi(-2));
        info[12..15].fill(c.initial_gyro_bias_sigma.powi(-2));
        self.graph
            .add_factor(PriorFactor::diagonal(key, Value::State(*state), &info))
    }

    fn add_matching_factors(&mut self, id: usize, frame: &Arc<Frame>, prediction: &SensorState) -> Result<()> {
        let key = Key::frame(id);
        let links = self.config.recent_frame_links;
        let recent: Vec<usize> = self.window.iter().rev().take(links).map(|w| w.id).collect();
        let mut created = 0;

        let admit = |target: &GaussianVoxelMap, target_pose: &crate::geometry::Se3Pose| {
            let rel = target_pose.inverse().compose(&prediction.pose);
            matching_cost(frame, target, &rel).1 >= self.config.min_inliers
        };

        let mut factors = Vec::new();
        for w in self.window.iter().rev().take(links) {
            let target_pose = self.graph.values().pose(&Key::frame(w.id))?;
            if admit(&w.voxelmap, target_pose) {
                factors.push(MatchingCostFactor::binary(
                    key,
                    Key::frame(w.id),
                    frame.clone(),
                    w.voxelmap.clone(),
                ));
            }
        }
        for kf in &self.keyframes.keyframes {
            if recent.contains(&kf.id) {
                continue;
            }
            if !admit(&kf.voxelmap, &kf.state.pose) {
                continue;
            }
            if kf.marginalized {
                factors.push(MatchingCostFactor::unary(
                    key,
                    frame.clone(),
                    kf.voxelmap.clone(),
                    kf.state.pose,
                ));
            } else {
                factors.push(MatchingCostFactor::binary(
                    key,
                    Key::frame(kf.id),
                    frame.clone(),
                    kf.voxelmap.clone(),
                ));
            }
        }
        for f in factors {
            self.graph.add_factor(f)?;
            created += 1;
        }
        if created == 0 && !self.config.use_imu_factors {
            return Err(Error::UnderConstrainedGraph(format!(
                "frame {id} has no matching partner"
            )));
        }
        Ok(())
    }

    fn samples_between(&self, t0: f64, t1: f64) -> Vec<ImuSample> {
        // One sample of margin on each side so boundaries can be interpolated.
        let lo = self.imu.partition_point(|s| s.stamp < t0).saturating_sub(1);
        let hi = (self.imu.partition_point(|s| s.stamp <= t1) + 1).min(self.imu.len());
        self.imu[lo..hi].to_vec()
    }

    fn marginalize_oldest(&mut self) -> Result<MarginalizedFrame> {
        let w = self.window.pop_front().expect("window is not empty");
        let key = Key::frame(w.id);
        let state = *self.graph.values().state(&key)?;
        let variance = match marginal_covariance(&self.graph, &key) {
            Ok(cov) => {
                let d: DVector<f64> = cov.diagonal();
                let mut v = [0.0; 9];
                for (i, x) in v.iter_mut().enumerate() {
                    *x = d[6 + i].max(0.0);
                }
                v
            }
            Err(e) => {
                log::warn!("frame {}: marginal covariance unavailable ({e}); using defaults", w.id);
                let c = &self.config;
                let mut v = [0.0; 9];
                v[..3].fill(0.25);
                v[3..6].fill(c.initial_accel_bias_sigma.powi(2));
                v[6..].fill(c.initial_gyro_bias_sigma.powi(2));
                v
            }
        };
        marginalize(&mut self.graph, &[key])?;
        self.keyframes.mark_marginalized(w.id, &state);
        let imu = self.samples_between(w.prev_stamp, frame_end(&w.raw));
        drop(w.frame);
        drop(w.voxelmap);
        Ok(MarginalizedFrame {
            id: w.id,
            raw: w.raw,
            imu,
            state,
            velocity_bias_variance: variance,
        })
    }

    fn trim_imu(&mut self) {
        let keep_from = self.window.front().map_or(self.last_stamp, |w| w.prev_stamp) - 1.0;
        let cut = self.imu.partition_point(|s| s.stamp < keep_from);
        if cut > 0 {
            self.imu.drain(..cut);
        }
    }
}

fn frame_end(frame: &Frame) -> f64 {
    frame.times.iter().copied().fold(frame.scan_end, f64::max)
}
