//! Submap-level graph: submap poses, endpoint states tied to them, IMU
//! factors across submap gaps and overlap-gated matching-cost factors.

mod relative;

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::Arc;

use nalgebra::Vector3;

pub use relative::{relative_state_residual, RelativeState, RelativeStateFactor};

use crate::error::{Error, Result};
use crate::geometry::Se3Pose;
use crate::graph::{
    reduced_information, schur_complement, warm_restart_optimize, FactorGraph, Key, KeyKind, LmSettings, PriorFactor,
    Reduction, Value, Values,
};
use crate::imu::{preintegrate, ImuFactor, ImuNoiseParams};
use crate::local_mapping::Submap;
use crate::preprocess::DEFAULT_MAX_IMU_GAP;
use crate::registration::{overlap_rate, MatchingCostFactor};

/// Default floor on per-submap translation information (1/m²): each submap
/// position must be pinned to about 1 cm by its neighbors.
pub const DEFAULT_DEGENERACY_THRESHOLD: f64 = 1e4;

#[derive(Clone, Debug)]
pub struct GlobalMappingConfig {
    /// A matching-cost factor joins two submaps whose overlap exceeds this.
    pub factor_overlap_min: f64,
    /// Optimize after this many insertions.
    pub optimize_every: usize,
    /// Stiffness of the endpoint ties (standard deviation per unit).
    pub relative_sigma: f64,
    pub noise: ImuNoiseParams,
    pub max_imu_gap: f64,
    pub lm: LmSettings,
    pub use_imu_factors: bool,
    /// Prior strength anchoring the first submap.
    pub gauge_information: f64,
    /// When set, a solution whose weakest submap translation information
    /// (1/m², see [`weakest_translation_information`]) falls below this is
    /// rejected as under-constrained.
    pub degeneracy_threshold: Option<f64>,
}

impl Default for GlobalMappingConfig {
    fn default() -> Self {
        Self {
            factor_overlap_min: 0.05,
            optimize_every: 5,
            relative_sigma: 1e-3,
            noise: ImuNoiseParams::default(),
            max_imu_gap: DEFAULT_MAX_IMU_GAP,
            lm: LmSettings::default(),
            use_imu_factors: true,
            gauge_information: 1e6,
            degeneracy_threshold: Some(DEFAULT_DEGENERACY_THRESHOLD),
        }
    }
}

/// Outcome of one global optimization.
#[derive(Clone, Debug)]
pub struct GlobalOptimization {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Weakest translation information (1/m²) when the degeneracy check ran.
    pub min_eigenvalue: Option<f64>,
}

/// Owns the submap graph and its latest optimized estimate.
pub struct GlobalMapper {
    config: GlobalMappingConfig,
    graph: FactorGraph,
    submaps: Vec<Arc<Submap>>,
    estimate: Values,
    matching_pairs: BTreeSet<(usize, usize)>,
    since_optimization: usize,
    failures: usize,
}

impl GlobalMapper {
    pub fn new(config: GlobalMappingConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&config.factor_overlap_min)
            || config.optimize_every == 0
            || config.relative_sigma <= 0.0
        {
            return Err(Error::Config("invalid global mapping settings".into()));
        }
        Ok(Self {
            config,
            graph: FactorGraph::new(),
            submaps: Vec::new(),
            estimate: Values::new(),
            matching_pairs: BTreeSet::new(),
            since_optimization: 0,
            failures: 0,
        })
    }

    pub fn config(&self) -> &GlobalMappingConfig {
        &self.config
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    pub fn submaps(&self) -> &[Arc<Submap>] {
        &self.submaps
    }

    /// Submap pairs `(newer, older)` joined by a matching-cost factor.
    pub fn matching_pairs(&self) -> &BTreeSet<(usize, usize)> {
        &self.matching_pairs
    }

    /// Number of optimizations that failed and left the estimate unchanged.
    pub fn failures(&self) -> usize {
        self.failures
    }

    /// Latest optimized (or initial) pose of a submap.
    pub fn submap_pose(&self, id: usize) -> Result<Se3Pose> {
        let key = Key::submap(id);
        match self.estimate.pose(&key) {
            Ok(p) => Ok(*p),
            Err(_) => self.graph.values().pose(&key).copied(),
        }
    }

    /// Current estimate of every variable.
    pub fn estimate(&self) -> &Values {
        &self.estimate
    }

    /// Adds a finalized submap and its factors, optimizing on cadence.
    pub fn insert_submap(&mut self, submap: Submap) -> Result<Option<GlobalOptimization>> {
        let submap = Arc::new(submap);
        let id = submap.id;
        if self
            .submaps
            .last()
            .is_some_and(|prev| prev.id >= id || prev.right_stamp >= submap.left_stamp)
        {
            return Err(Error::OutOfOrder(format!("submap {id} arrived out of order")));
        }
        let pose = match self.submaps.last() {
            None => submap.origin,
            // Chain the locally estimated motion onto the corrected previous pose.
            Some(prev) => self
                .submap_pose(prev.id)?
                .compose(&prev.origin.inverse().compose(&submap.origin)),
        };
        let (key, left, right) = (Key::submap(id), Key::left_endpoint(id), Key::right_endpoint(id));
        self.add_variable(key, Value::Pose(pose))?;
        self.add_variable(left, Value::State(submap.endpoint_world(&pose, false)))?;
        self.add_variable(right, Value::State(submap.endpoint_world(&pose, true)))?;
        let sigma = self.config.relative_sigma;
        self.graph
            .add_factor(RelativeStateFactor::new(key, left, submap.endpoint_left, sigma))?;
        self.graph
            .add_factor(RelativeStateFactor::new(key, right, submap.endpoint_right, sigma))?;

        match self.submaps.last().cloned() {
            None => {
                self.graph.add_factor(PriorFactor::isotropic(
                    key,
                    Value::Pose(pose),
                    self.config.gauge_information,
                ))?;
            }
            Some(prev) if self.config.use_imu_factors => self.add_gap_factor(&prev, &submap)?,
            Some(_) => {}
        }

        for other in &self.submaps {
            let other_pose = self.submap_pose(other.id)?;
            let forward = overlap_rate(&submap.frame, &other.voxelmap, &other_pose.inverse().compose(&pose));
            let backward = overlap_rate(&other.frame, &submap.voxelmap, &pose.inverse().compose(&other_pose));
            if forward.max(backward) > self.config.factor_overlap_min {
                self.graph.add_factor(MatchingCostFactor::binary(
                    key,
                    Key::submap(other.id),
                    submap.frame.clone(),
                    other.voxelmap.clone(),
                ))?;
                self.matching_pairs.insert((id, other.id));
            }
        }
        self.submaps.push(submap);

        self.since_optimization += 1;
        if self.since_optimization >= self.config.optimize_every {
            return match self.optimize() {
                Ok(r) => Ok(Some(r)),
                Err(e @ (Error::NotConverged { .. } | Error::UnderConstrainedGraph(_))) => {
                    log::warn!("global optimization failed: {e}; keeping previous estimate");
                    Ok(None)
                }
                Err(e) => Err(e),
            };
        }
        Ok(None)
    }

    /// Runs a warm-started optimization over the whole graph. On failure
    /// the previous estimate is kept and the error returned.
    pub fn optimize(&mut self) -> Result<GlobalOptimization> {
        self.since_optimization = 0;
        if self.submaps.is_empty() {
            return Err(Error::NoData);
        }
        let result = warm_restart_optimize(&self.graph, &self.estimate, &self.config.lm).and_then(|res| {
            let min_eigenvalue = match self.config.degeneracy_threshold {
                None => None,
                Some(threshold) => {
                    let mut g = self.graph.clone();
                    g.set_values(res.values.clone());
                    let min = weakest_translation_information(&g)?;
                    if min.is_nan() || min < threshold {
                        return Err(Error::UnderConstrainedGraph(format!(
                            "weakest submap translation information {min:.3e} /m² below {threshold:.3e}"
                        )));
                    }
                    Some(min)
                }
            };
            Ok((res, min_eigenvalue))
        });
        match result {
            Ok((res, min_eigenvalue)) => {
                self.estimate = res.values.clone();
                self.graph.set_values(res.values);
                Ok(GlobalOptimization {
                    initial_cost: res.initial_cost,
                    final_cost: res.final_cost,
                    iterations: res.iterations,
                    min_eigenvalue,
                })
            }
            Err(e) => {
                self.failures += 1;
                Err(e)
            }
        }
    }

    /// Final optimization at the end of a sequence.
    pub fn finish(&mut self) -> Result<Option<GlobalOptimization>> {
        if self.submaps.is_empty() {
            return Ok(None);
        }
        self.optimize().map(Some)
    }

    /// World pose of every frame the submaps recorded, in time order.
    pub fn trajectory(&self) -> Result<Vec<(f64, Se3Pose)>> {
        let mut out = Vec::new();
        for s in &self.submaps {
            let origin = self.submap_pose(s.id)?;
            out.extend(s.trajectory.iter().map(|(t, rel)| (*t, origin.compose(rel))));
        }
        Ok(out)
    }

    /// All merged submap points in world coordinates.
    pub fn map_points(&self) -> Result<Vec<Vector3<f64>>> {
        let mut out = Vec::new();
        for s in &self.submaps {
            let origin = self.submap_pose(s.id)?;
            out.extend(s.merged.points.iter().map(|p| origin.apply(p)));
        }
        Ok(out)
    }

    /// Writes one line per factor.
    pub fn dump_graph(&self, out: &mut impl Write) -> Result<()> {
        self.graph.dump(out)
    }

    fn add_variable(&mut self, key: Key, value: Value) -> Result<()> {
        self.estimate.insert(key, value.clone());
        self.graph.add_variable(key, value)
    }

    /// IMU factor from the previous submap's last member to this one's first,
    /// linearized at the later left endpoint's bias.
    fn add_gap_factor(&mut self, prev: &Submap, next: &Submap) -> Result<()> {
        let (t0, t1) = (prev.right_stamp, next.left_stamp);
        let bias = next.endpoint_left.bias;
        // The later submap's samples start at or before the earlier one's
        // last member.
        let samples = next.imu.clone();
        match preintegrate(&samples, t0, t1, &bias, &self.config.noise, self.config.max_imu_gap) {
            Ok(pre) => {
                let factor = ImuFactor::new(
                    Key::right_endpoint(prev.id),
                    Key::left_endpoint(next.id),
                    pre,
                    self.config.noise,
                )
                .with_samples(samples, self.config.max_imu_gap);
                self.graph.add_factor(factor)
            }
            Err(e @ (Error::ImuCoverageGap { .. } | Error::InvalidInterval { .. })) => {
                log::warn!("no IMU factor between submaps {} and {}: {e}", prev.id, next.id);
                Ok(())
            }
            Err(e) => Err(e),
        }
    }
}

/// Smallest eigenvalue (1/m²) of the translation information any single
/// submap receives when every other submap pose is held fixed, with its own
/// rotation and all endpoint states marginalized.
///
/// Matching factors contribute only along surface normals here, so a
/// submap that can slide along featureless geometry scores near zero
/// unless other factors (IMU, endpoint ties) pin it. Conditioning on the
/// neighbors keeps the measure local: it does not shrink as the graph grows.
pub fn weakest_translation_information(graph: &FactorGraph) -> Result<f64> {
    let info = reduced_information(graph, |k| match k.kind {
        KeyKind::SubmapPose => Reduction::Keep,
        _ => Reduction::Eliminate,
    })?;
    let mut weakest = f64::INFINITY;
    for &(_, off, _) in &info.blocks {
        // Pose tangents are [rotation, translation].
        let block = info.matrix.view((off, off), (6, 6)).into_owned();
        let t = schur_complement(&block, &[3, 4, 5], &[0, 1, 2])?;
        weakest = weakest.min(t.symmetric_eigenvalues().min());
    }
    Ok(weakest)
}
