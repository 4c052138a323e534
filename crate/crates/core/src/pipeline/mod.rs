//! End-to-end orchestration: preprocess → odometry → local mapping →
//! global mapping, connected by bounded queues.

mod config;
mod report;

use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::Vector3;

pub use config::PipelineConfig;
pub use report::{RunReport, StageTimes};

use crate::error::{Error, Result};
use crate::global_mapping::{GlobalMapper, GlobalOptimization};
use crate::imu::ImuSample;
use crate::local_mapping::{Submap, SubmapBuilder};
use crate::metrics::TrajectoryRecord;
use crate::odometry::{FrameEstimate, MarginalizedFrame, Odometry};
use crate::preprocess::{prepare_frame, Frame, RawScan};

/// How stages are scheduled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    /// One thread per stage.
    #[default]
    Threaded,
    /// All stages on the calling thread, one scan at a time.
    Sequential,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub execution: Execution,
    /// Capture the final global graph as text.
    pub dump_graph: bool,
}

/// Everything a run produces.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    /// Globally optimized pose of every frame that reached a submap.
    pub trajectory: Vec<TrajectoryRecord>,
    /// Online odometry estimate of every processed frame.
    pub odometry: Vec<TrajectoryRecord>,
    pub submap_poses: Vec<TrajectoryRecord>,
    pub map: Vec<Vector3<f64>>,
    /// Finalized submaps in creation order.
    pub submaps: Vec<Arc<Submap>>,
    /// Per-frame odometry outcomes in processing order.
    pub frames: Vec<FrameEstimate>,
    /// Matching-cost factor pairs (newer, older) of the global graph.
    pub submap_pairs: Vec<(usize, usize)>,
    pub report: RunReport,
    pub graph_dump: Option<String>,
    /// The fatal error that stopped the run early, if any.
    pub error: Option<StageError>,
}

/// A fatal error and the stage it stopped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageError {
    pub stage: &'static str,
    /// [`Error::kind`] of the underlying error.
    pub kind: &'static str,
    pub message: String,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.stage, self.message)
    }
}

struct OdometryStage {
    odometry: Odometry,
    imu: Vec<ImuSample>,
    next_imu: usize,
    frames: Vec<FrameEstimate>,
    times: StageTimes,
}

impl OdometryStage {
    fn new(config: &PipelineConfig, imu: Vec<ImuSample>) -> Result<Self> {
        Ok(Self {
            odometry: Odometry::new(config.odometry())?,
            imu,
            next_imu: 0,
            frames: Vec::new(),
            times: StageTimes::default(),
        })
    }

    /// Hands the estimator IMU data through the first sample at or after
    /// the end of the scan.
    fn feed_imu(&mut self, until: f64) -> Result<()> {
        while let Some(&s) = self.imu.get(self.next_imu) {
            self.odometry.push_imu(s)?;
            self.next_imu += 1;
            if s.stamp >= until {
                break;
            }
        }
        Ok(())
    }

    fn process(&mut self, frame: Frame) -> Result<Vec<MarginalizedFrame>> {
        let started = Instant::now();
        self.feed_imu(frame.scan_end)?;
        let out = self.odometry.process_frame(frame)?;
        self.times.push(started.elapsed());
        Ok(match out {
            Some((estimate, marginalized)) => {
                self.frames.push(estimate);
                marginalized
            }
            None => Vec::new(),
        })
    }

    fn finish(&mut self) -> Result<Vec<MarginalizedFrame>> {
        self.odometry.finish()
    }
}

struct LocalStage {
    builder: SubmapBuilder,
    times: StageTimes,
    pending: Duration,
}

impl LocalStage {
    fn insert(&mut self, mf: MarginalizedFrame) -> Result<Option<Submap>> {
        let started = Instant::now();
        let out = self.builder.insert_frame(mf);
        self.pending += started.elapsed();
        self.close(out)
    }

    fn flush(&mut self) -> Result<Option<Submap>> {
        let started = Instant::now();
        let out = self.builder.flush();
        self.pending += started.elapsed();
        self.close(out)
    }

    fn close(&mut self, out: Result<Option<Submap>>) -> Result<Option<Submap>> {
        if let Ok(Some(_)) = out {
            self.times.push(std::mem::take(&mut self.pending));
        }
        out
    }
}

struct GlobalStage {
    mapper: GlobalMapper,
    times: StageTimes,
    optimizations: usize,
    last: Option<GlobalOptimization>,
}

impl GlobalStage {
    fn insert(&mut self, submap: Submap) -> Result<()> {
        let started = Instant::now();
        if let Some(opt) = self.mapper.insert_submap(submap)? {
            self.optimizations += 1;
            self.last = Some(opt);
        }
        self.times.push(started.elapsed());
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        let started = Instant::now();
        if let Some(opt) = self.mapper.finish()? {
            self.optimizations += 1;
            self.last = Some(opt);
        }
        self.times.push(started.elapsed());
        Ok(())
    }
}

fn timed_prepare(scan: &RawScan, config: &PipelineConfig, times: &mut StageTimes) -> Result<Option<Frame>> {
    let started = Instant::now();
    match prepare_frame(scan, &config.preprocess()) {
        Ok(f) => {
            times.push(started.elapsed());
            Ok(Some(f))
        }
        Err(e @ Error::FrameTooSparse { .. }) => {
            log::warn!("skipping scan at {}: {e}", scan.scan_start);
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Keeps the first fatal error of a stage.
#[derive(Default)]
struct Failure(Option<StageError>);

impl Failure {
    fn record(&mut self, stage: &'static str, e: &Error) {
        log::error!("{stage} stage stopped: {e}");
        if self.0.is_none() {
            self.0 = Some(StageError {
                stage,
                kind: e.kind(),
                message: e.to_string(),
            });
        }
    }

    fn merge(&mut self, other: Failure) {
        if self.0.is_none() {
            self.0 = other.0;
        }
    }
}

/// Runs the full pipeline over a scan stream and the IMU log.
///
/// Fatal stage errors stop the run early; whatever reached the later
/// stages is still flushed and returned, with the diagnostic in
/// [`RunOutput::error`]. A stream without scans yields [`Error::NoData`].
pub fn run_pipeline<I>(
    config: &PipelineConfig,
    scans: I,
    imu: Vec<ImuSample>,
    options: &RunOptions,
) -> Result<RunOutput>
where
    I: IntoIterator<Item = Result<RawScan>>,
    I::IntoIter: Send,
{
    config.validate()?;
    let started = Instant::now();
    let odometry = OdometryStage::new(config, imu)?;
    let local = LocalStage {
        builder: SubmapBuilder::new(config.local_mapping())?,
        times: StageTimes::default(),
        pending: Duration::ZERO,
    };
    let global = GlobalStage {
        mapper: GlobalMapper::new(config.global_mapping())?,
        times: StageTimes::default(),
        optimizations: 0,
        last: None,
    };
    let scans = scans.into_iter();
    let stages = match options.execution {
        Execution::Sequential => run_sequential(config, scans, odometry, local, global),
        Execution::Threaded => run_threaded(config, scans, odometry, local, global),
    };
    let Stages {
        scans_read,
        preprocess,
        odometry,
        local,
        global,
        failure,
    } = stages;
    if scans_read == 0 && failure.0.is_none() {
        return Err(Error::NoData);
    }
    collect_output(
        config,
        options,
        started.elapsed(),
        scans_read,
        preprocess,
        odometry,
        local,
        global,
        failure,
    )
}

struct Stages {
    scans_read: usize,
    preprocess: StageTimes,
    odometry: OdometryStage,
    local: LocalStage,
    global: GlobalStage,
    failure: Failure,
}

fn run_sequential(
    config: &PipelineConfig,
    scans: impl Iterator<Item = Result<RawScan>>,
    mut odometry: OdometryStage,
    mut local: LocalStage,
    mut global: GlobalStage,
) -> Stages {
    let mut failure = Failure::default();
    let mut preprocess = StageTimes::default();
    let mut scans_read = 0;
    // Once a stage fails, it and everything upstream stop; downstream
    // stages still flush what they hold.
    let mut odometry_ok = true;
    let mut local_ok = true;
    let mut global_ok = true;

    let deliver = |frames: Vec<MarginalizedFrame>,
                   local: &mut LocalStage,
                   global: &mut GlobalStage,
                   failure: &mut Failure,
                   local_ok: &mut bool,
                   global_ok: &mut bool| {
        for mf in frames {
            match local.insert(mf) {
                Ok(Some(submap)) => {
                    if let Err(e) = global.insert(submap) {
                        failure.record("global mapping", &e);
                        *global_ok = false;
                        *local_ok = false;
                        return;
                    }
                }
                Ok(None) => {}
                Err(e) => {
                    failure.record("local mapping", &e);
                    *local_ok = false;
                    return;
                }
            }
        }
    };

    for scan in scans {
        let scan = match scan {
            Ok(s) => s,
            Err(e) => {
                failure.record("input", &e);
                break;
            }
        };
        scans_read += 1;
        let frame = match timed_prepare(&scan, config, &mut preprocess) {
            Ok(Some(f)) => f,
            Ok(None) => continue,
            Err(e) => {
                failure.record("preprocess", &e);
                break;
            }
        };
        match odometry.process(frame) {
            Ok(m) => deliver(m, &mut local, &mut global, &mut failure, &mut local_ok, &mut global_ok),
            Err(e) => {
                failure.record("odometry", &e);
                odometry_ok = false;
            }
        }
        if !(odometry_ok && local_ok) {
            break;
        }
    }
    if odometry_ok && local_ok {
        match odometry.finish() {
            Ok(m) => deliver(m, &mut local, &mut global, &mut failure, &mut local_ok, &mut global_ok),
            Err(e) => failure.record("odometry", &e),
        }
    }
    if local_ok {
        match local.flush() {
            Ok(Some(submap)) => {
                if let Err(e) = global.insert(submap) {
                    failure.record("global mapping", &e);
                    global_ok = false;
                }
            }
            Ok(None) => {}
            Err(e) => failure.record("local mapping", &e),
        }
    }
    if global_ok {
        if let Err(e) = global.finish() {
            failure.record("global mapping", &e);
        }
    }
    Stages {
        scans_read,
        preprocess,
        odometry,
        local,
        global,
        failure,
    }
}

fn run_threaded(
    config: &PipelineConfig,
    scans: impl Iterator<Item = Result<RawScan>> + Send,
    odometry: OdometryStage,
    local: LocalStage,
    global: GlobalStage,
) -> Stages {
    let cap = config.queue_capacity;
    let (frame_tx, frame_rx) = sync_channel::<Frame>(cap);
    let (marg_tx, marg_rx) = sync_channel::<MarginalizedFrame>(cap);
    let (submap_tx, submap_rx) = sync_channel::<Submap>(cap);

    std::thread::scope(|scope| {
        let pre = scope.spawn(move || preprocess_thread(config, scans, frame_tx));
        let odo = scope.spawn(move || odometry_thread(odometry, frame_rx, marg_tx));
        let loc = scope.spawn(move || local_thread(local, marg_rx, submap_tx));
        let glo = scope.spawn(move || global_thread(global, submap_rx));

        let (scans_read, preprocess, mut failure) = pre.join().expect("preprocess thread panicked");
        let (odometry, f) = odo.join().expect("odometry thread panicked");
        failure.merge(f);
        let (local, f) = loc.join().expect("local mapping thread panicked");
        failure.merge(f);
        let (global, f) = glo.join().expect("global mapping thread panicked");
        failure.merge(f);
        Stages {
            scans_read,
            preprocess,
            odometry,
            local,
            global,
            failure,
        }
    })
}

fn preprocess_thread(
    config: &PipelineConfig,
    scans: impl Iterator<Item = Result<RawScan>>,
    out: SyncSender<Frame>,
) -> (usize, StageTimes, Failure) {
    let mut failure = Failure::default();
    let mut times = StageTimes::default();
    let mut read = 0;
    for scan in scans {
        let scan = match scan {
            Ok(s) => s,
            Err(e) => {
                failure.record("input", &e);
                break;
            }
        };
        read += 1;
        match timed_prepare(&scan, config, &mut times) {
            Ok(Some(frame)) => {
                if out.send(frame).is_err() {
                    // Downstream stopped; its diagnostic explains why.
                    break;
                }
            }
            Ok(None) => {}
            Err(e) => {
                failure.record("preprocess", &e);
                break;
            }
        }
    }
    (read, times, failure)
}

fn odometry_thread(
    mut stage: OdometryStage,
    input: Receiver<Frame>,
    out: SyncSender<MarginalizedFrame>,
) -> (OdometryStage, Failure) {
    let mut failure = Failure::default();
    let send_all = |frames: Vec<MarginalizedFrame>| frames.into_iter().all(|mf| out.send(mf).is_ok());
    for frame in input.iter() {
        match stage.process(frame) {
            Ok(m) => {
                if !send_all(m) {
                    return (stage, failure);
                }
            }
            Err(e) => {
                failure.record("odometry", &e);
                return (stage, failure);
            }
        }
    }
    match stage.finish() {
        Ok(m) => {
            send_all(m);
        }
        Err(e) => failure.record("odometry", &e),
    }
    (stage, failure)
}

fn local_thread(
    mut stage: LocalStage,
    input: Receiver<MarginalizedFrame>,
    out: SyncSender<Submap>,
) -> (LocalStage, Failure) {
    let mut failure = Failure::default();
    for mf in input.iter() {
        match stage.insert(mf) {
            Ok(Some(submap)) => {
                if out.send(submap).is_err() {
                    return (stage, failure);
                }
            }
            Ok(None) => {}
            Err(e) => {
                failure.record("local mapping", &e);
                return (stage, failure);
            }
        }
    }
    match stage.flush() {
        Ok(Some(submap)) => {
            let _ = out.send(submap);
        }
        Ok(None) => {}
        Err(e) => failure.record("local mapping", &e),
    }
    (stage, failure)
}

fn global_thread(mut stage: GlobalStage, input: Receiver<Submap>) -> (GlobalStage, Failure) {
    let mut failure = Failure::default();
    for submap in input.iter() {
        if let Err(e) = stage.insert(submap) {
            failure.record("global mapping", &e);
            return (stage, failure);
        }
    }
    if let Err(e) = stage.finish() {
        failure.record("global mapping", &e);
    }
    (stage, failure)
}

#[allow(clippy::too_many_arguments)]
fn collect_output(
    config: &PipelineConfig,
    options: &RunOptions,
    wall: Duration,
    scans_read: usize,
    preprocess: StageTimes,
    odometry: OdometryStage,
    local: LocalStage,
    global: GlobalStage,
    failure: Failure,
) -> Result<RunOutput> {
    let mapper = &global.mapper;
    let trajectory = mapper.trajectory()?.into_iter().map(TrajectoryRecord::from).collect();
    let submap_poses = mapper
        .submaps()
        .iter()
        .map(|s| Ok(TrajectoryRecord::new(s.origin_stamp, mapper.submap_pose(s.id)?)))
        .collect::<Result<Vec<_>>>()?;
    let graph_dump = if options.dump_graph {
        let mut buf = Vec::new();
        mapper.dump_graph(&mut buf)?;
        Some(String::from_utf8(buf).expect("graph dump is UTF-8"))
    } else {
        None
    };
    let frames = odometry.frames;
    let report = RunReport {
        scans: scans_read,
        frames: frames.len(),
        degraded_frames: frames.iter().filter(|f| f.degraded).count(),
        keyframes: odometry.odometry.keyframes().len(),
        submaps: mapper.submaps().len(),
        submap_factors: mapper.matching_pairs().len(),
        global_optimizations: global.optimizations,
        global_failures: mapper.failures(),
        global_iterations: global.last.as_ref().map(|o| o.iterations),
        global_min_eigenvalue: global.last.as_ref().and_then(|o| o.min_eigenvalue),
        use_imu: config.use_imu,
        preprocess,
        odometry: odometry.times,
        local_mapping: local.times,
        global_mapping: global.times,
        wall,
        error: failure.0.as_ref().map(|e| e.to_string()),
    };
    Ok(RunOutput {
        trajectory,
        odometry: frames
            .iter()
            .map(|f| TrajectoryRecord::new(f.state.stamp, f.state.pose))
            .collect(),
        submap_poses,
        map: mapper.map_points()?,
        submaps: mapper.submaps().to_vec(),
        frames,
        submap_pairs: mapper.matching_pairs().iter().copied().collect(),
        report,
        graph_dump,
        error: failure.0,
    })
}
