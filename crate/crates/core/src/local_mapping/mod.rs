//! Submap construction: frames leaving the odometry window are re-deskewed
//! with their smoothed states, jointly refined by all-to-all registration and
//! merged into one cloud with a single origin.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{Se3Pose, SensorState, STATE_DIM};
use crate::global_mapping::RelativeState;
use crate::graph::{optimize_lm, FactorGraph, Key, LmSettings, PriorFactor, Value};
use crate::imu::{preintegrate, ImuFactor, ImuNoiseParams, ImuSample};
use crate::odometry::MarginalizedFrame;
use crate::preprocess::{
    deskew, estimate_covariances, knn_search, voxel_downsample, Frame, PreprocessConfig, RawScan, TimedPoint,
};
use crate::registration::{overlap_rate, GaussianVoxelMap, MatchingCostFactor};

#[derive(Clone, Debug)]
pub struct LocalMappingConfig {
    /// A frame is inserted when its overlap with the latest member is below this.
    pub insert_overlap: f64,
    /// Members per submap.
    pub max_frames: usize,
    /// The submap closes when first and latest members overlap less than this.
    pub min_first_last_overlap: f64,
    /// Voxel size of per-frame maps used for gating and registration.
    pub frame_voxel_resolution: f64,
    /// Voxel size used to thin the merged cloud.
    pub submap_downsample_resolution: f64,
    /// Voxel size of the submap's map used by global factors.
    pub submap_voxel_resolution: f64,
    pub preprocess: PreprocessConfig,
    pub noise: ImuNoiseParams,
    pub lm: LmSettings,
    pub use_imu_factors: bool,
    /// Take velocity/bias prior strengths from the odometry marginals.
    pub use_marginal_covariance: bool,
    pub default_velocity_sigma: f64,
    pub default_accel_bias_sigma: f64,
    pub default_gyro_bias_sigma: f64,
    /// Prior strength on the first member's pose.
    pub gauge_information: f64,
}

impl Default for LocalMappingConfig {
    fn default() -> Self {
        Self {
            insert_overlap: 0.9,
            max_frames: 15,
            min_first_last_overlap: 0.05,
            frame_voxel_resolution: 0.5,
            submap_downsample_resolution: 0.25,
            submap_voxel_resolution: 1.0,
            preprocess: PreprocessConfig::default(),
            noise: ImuNoiseParams::default(),
            lm: LmSettings::default(),
            use_imu_factors: true,
            use_marginal_covariance: true,
            default_velocity_sigma: 0.5,
            default_accel_bias_sigma: 0.1,
            default_gyro_bias_sigma: 0.01,
            gauge_information: 1e6,
        }
    }
}

/// A finalized, immutable submap.
#[derive(Clone, Debug)]
pub struct Submap {
    pub id: usize,
    /// World pose of the center member after local refinement.
    pub origin: Se3Pose,
    pub origin_stamp: f64,
    /// Every member point in the origin frame.
    pub merged: Arc<Frame>,
    /// Thinned merged cloud with covariances, used as a registration source.
    pub frame: Arc<Frame>,
    pub voxelmap: Arc<GaussianVoxelMap>,
    pub endpoint_left: RelativeState,
    pub endpoint_right: RelativeState,
    pub left_stamp: f64,
    pub right_stamp: f64,
    /// Odometry frame ids of the members.
    pub members: Vec<usize>,
    /// Pose of every frame received since the previous submap, relative to
    /// the origin, members and skipped frames alike.
    pub trajectory: Vec<(f64, Se3Pose)>,
    /// IMU samples from the previous submap's last member through this one's.
    pub imu: Vec<ImuSample>,
    /// Local refinement failed and odometry states were used.
    pub degraded: bool,
    /// Number of matching-cost, IMU and prior factors in the refinement.
    pub factor_counts: (usize, usize, usize),
}

impl Submap {
    /// Absolute state of the first or last member for a given origin.
    pub fn endpoint_world(&self, origin: &Se3Pose, right: bool) -> SensorState {
        if right {
            self.endpoint_right.to_world(origin, self.right_stamp)
        } else {
            self.endpoint_left.to_world(origin, self.left_stamp)
        }
    }
}

struct Member {
    id: usize,
    frame: Arc<Frame>,
    voxelmap: Arc<GaussianVoxelMap>,
    state: SensorState,
    variance: [f64; 9],
}

/// Accumulates frames until a submap is complete.
pub struct SubmapBuilder {
    config: LocalMappingConfig,
    members: Vec<Member>,
    /// Frames since the last submap as (stamp, odometry pose, index of the latest member at arrival).
    received: Vec<(f64, Se3Pose, usize)>,
    imu: Vec<ImuSample>,
    last_stamp: f64,
    next_id: usize,
}

impl SubmapBuilder {
    pub fn new(config: LocalMappingConfig) -> Result<Self> {
        if !(0.0 < config.min_first_last_overlap && config.min_first_last_overlap < config.insert_overlap) {
            return Err(Error::Config(
                "submap overlaps must satisfy 0 < min_first_last < insert".into(),
            ));
        }
        if config.max_frames == 0 {
            return Err(Error::Config("submaps need at least one frame".into()));
        }
        Ok(Self {
            config,
            members: Vec::new(),
            received: Vec::new(),
            imu: Vec::new(),
            last_stamp: f64::NEG_INFINITY,
            next_id: 0,
        })
    }

    pub fn config(&self) -> &LocalMappingConfig {
        &self.config
    }

    pub fn pending(&self) -> usize {
        self.members.len()
    }

    /// Feeds one marginalized frame; returns a submap when one completes.
    pub fn insert_frame(&mut self, mf: MarginalizedFrame) -> Result<Option<Submap>> {
        if mf.state.stamp <= self.last_stamp {
            return Err(Error::OutOfOrder(format!(
                "frame at {} after {}",
                mf.state.stamp, self.last_stamp
            )));
        }
        self.last_stamp = mf.state.stamp;
        for s in &mf.imu {
            if self.imu.last().is_none_or(|l| s.stamp > l.stamp) {
                self.imu.push(*s);
            }
        }

        let cfg = &self.config;
        let gravity = cfg.noise.gravity;
        let deskewed = deskew(&mf.raw, &mf.imu, &mf.state, &gravity, cfg.preprocess.max_imu_gap)?;
        let frame = Arc::new(estimate_covariances(deskewed, cfg.preprocess.plane_epsilon)?);

        let insert = match self.members.last() {
            None => true,
            Some(latest) => {
                let rel = latest.state.pose.inverse().compose(&mf.state.pose);
                overlap_rate(&frame, &latest.voxelmap, &rel) < cfg.insert_overlap
            }
        };
        if !insert {
            self.received
                .push((mf.state.stamp, mf.state.pose, self.members.len() - 1));
            return Ok(None);
        }

        let voxelmap = Arc::new(GaussianVoxelMap::build(&frame, cfg.frame_voxel_resolution));
        self.members.push(Member {
            id: mf.id,
            frame,
            voxelmap,
            state: mf.state,
            variance: mf.velocity_bias_variance,
        });
        self.received
            .push((mf.state.stamp, mf.state.pose, self.members.len() - 1));

        let n = self.members.len();
        let close = n >= cfg.max_frames || {
            let first = &self.members[0];
            let last = &self.members[n - 1];
            n > 1
                && overlap_rate(
                    &last.frame,
                    &first.voxelmap,
                    &first.state.pose.inverse().compose(&last.state.pose),
                ) < cfg.min_first_last_overlap
        };
        if close {
            return self.finalize().map(Some);
        }
        Ok(None)
    }

    /// Finalizes whatever is pending (end of sequence).
    pub fn flush(&mut self) -> Result<Option<Submap>> {
        if self.members.is_empty() {
            return Ok(None);
        }
        self.finalize().map(Some)
    }

    /// Refines the pending members and merges them into a submap.
    pub fn finalize(&mut self) -> Result<Submap> {
        let cfg = self.config.clone();
        let members = std::mem::take(&mut self.members);
        let received = std::mem::take(&mut self.received);
        let n = members.len();
        assert!(n > 0, "finalize needs at least one member");

        let mut graph = FactorGraph::new();
        for m in &members {
            graph.add_variable(Key::frame(m.id), Value::State(m.state))?;
        }
        let mut counts = (0, 0, 0);
        for (i, m) in members.iter().enumerate() {
            for older in &members[..i] {
                graph.add_factor(MatchingCostFactor::binary(
                    Key::frame(m.id),
                    Key::frame(older.id),
                    m.frame.clone(),
                    older.voxelmap.clone(),
                ))?;
                counts.0 += 1;
            }
        }
        if cfg.use_imu_factors {
            for w in members.windows(2) {
                let (a, b) = (&w[0], &w[1]);
                let pre = preintegrate(
                    &self.imu,
                    a.state.stamp,
                    b.state.stamp,
                    &a.state.bias(),
                    &cfg.noise,
                    cfg.preprocess.max_imu_gap,
                )?;
                let samples = samples_in(&self.imu, a.state.stamp, b.state.stamp);
                graph.add_factor(
                    ImuFactor::new(Key::frame(a.id), Key::frame(b.id), pre, cfg.noise)
                        .with_samples(samples, cfg.preprocess.max_imu_gap),
                )?;
                counts.1 += 1;
            }
        }
        for (i, m) in members.iter().enumerate() {
            graph.add_factor(PriorFactor::diagonal(
                Key::frame(m.id),
                Value::State(m.state),
                &self.prior_information(m, i == 0),
            ))?;
            counts.2 += 1;
        }

        let (states, degraded) = if n == 1 {
            (vec![members[0].state], false)
        } else {
            match optimize_lm(&graph, &cfg.lm) {
                Ok(res) => (
                    members
                        .iter()
                        .map(|m| res.values.state(&Key::frame(m.id)).copied())
                        .collect::<Result<Vec<_>>>()?,
                    false,
                ),
                Err(Error::NotConverged { cost, .. }) => {
                    log::warn!("submap {}: refinement did not converge (cost {cost:.3e})", self.next_id);
                    (members.iter().map(|m| m.state).collect(), true)
                }
                Err(e) => return Err(e),
            }
        };

        let center = n / 2;
        let origin = states[center].pose;
        let origin_inv = origin.inverse();

        let mut merged_points = Vec::new();
        for (m, s) in members.iter().zip(&states) {
            let rel = origin_inv.compose(&s.pose);
            merged_points.extend(m.frame.points.iter().map(|p| rel.apply(p)));
        }
        let stamp = states[center].stamp;
        let merged = Frame {
            times: vec![stamp; merged_points.len()],
            points: merged_points,
            ..Frame::with_covariances(stamp, Vec::new(), Vec::new())
        };
        let frame = self.thin_cloud(&merged)?;
        let voxelmap = Arc::new(GaussianVoxelMap::build(&frame, cfg.submap_voxel_resolution));

        // Skipped frames keep their odometry pose relative to the member that
        // preceded them.
        let trajectory = received
            .iter()
            .map(|&(t, pose, k)| {
                let anchor = members[k].state.pose;
                let world = states[k].pose.compose(&anchor.inverse().compose(&pose));
                (t, origin_inv.compose(&world))
            })
            .collect();

        let left = states[0];
        let right = states[n - 1];
        let imu = std::mem::take(&mut self.imu);
        // Keep one sample before the right endpoint for the next gap.
        let keep = imu.partition_point(|s| s.stamp <= right.stamp).saturating_sub(1);
        self.imu = imu[keep..].to_vec();

        let id = self.next_id;
        self.next_id += 1;
        Ok(Submap {
            id,
            origin,
            origin_stamp: stamp,
            merged: Arc::new(merged),
            frame: Arc::new(frame),
            voxelmap,
            endpoint_left: RelativeState::from_world(&origin, &left),
            endpoint_right: RelativeState::from_world(&origin, &right),
            left_stamp: left.stamp,
            right_stamp: right.stamp,
            members: members.iter().map(|m| m.id).collect(),
            trajectory,
            imu,
            degraded,
            factor_counts: counts,
        })
    }

    fn prior_information(&self, m: &Member, gauge: bool) -> [f64; STATE_DIM] {
        let cfg = &self.config;
        let mut info = [0.0; STATE_DIM];
        if gauge {
            info[..6].fill(cfg.gauge_information);
        }
        let defaults = [
            cfg.default_velocity_sigma.powi(2),
            cfg.default_accel_bias_sigma.powi(2),
            cfg.default_gyro_bias_sigma.powi(2),
        ];
        for i in 0..9 {
            let var = if cfg.use_marginal_covariance && m.variance[i] > 0.0 {
                m.variance[i]
            } else {
                defaults[i / 3]
            };
            info[6 + i] = 1.0 / var.max(1e-12);
        }
        info
    }

    fn thin_cloud(&self, merged: &Frame) -> Result<Frame> {
        let cfg = &self.config;
        let scan = RawScan::new(
            merged
                .points
                .iter()
                .map(|p| TimedPoint::new(*p, merged.stamp))
                .collect(),
            merged.stamp,
            merged.stamp,
        );
        let down = voxel_downsample(&scan, cfg.submap_downsample_resolution);
        let mut frame = Frame::from_scan(&down);
        let k = cfg.preprocess.k_neighbors.min(frame.len());
        if k < 2 {
            return Err(Error::FrameTooSparse {
                points: frame.len(),
                k: cfg.preprocess.k_neighbors,
            });
        }
        frame.neighbors = Some(knn_search(&frame, k)?);
        frame.deskewed = true;
        estimate_covariances(frame, cfg.preprocess.plane_epsilon)
    }
}

fn samples_in(imu: &[ImuSample], t0: f64, t1: f64) -> Vec<ImuSample> {
    let lo = imu.partition_point(|s| s.stamp < t0).saturating_sub(1);
    let hi = (imu.partition_point(|s| s.stamp <= t1) + 1).min(imu.len());
    imu[lo..hi].to_vec()
}
