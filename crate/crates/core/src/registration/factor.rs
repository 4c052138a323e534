use std::sync::{Arc, Mutex};

use super::{
    associate, associated_cost, linearize_associated, linearize_associated_normal, Association, GaussianVoxelMap,
    MatchingCostLinearization,
};
use crate::error::Result;
use crate::geometry::Se3Pose;
use crate::graph::{local_offsets, Factor, Key, Linearization, Values};
use crate::preprocess::Frame;

/// Relative-pose change (rad) below which cached correspondences are reused.
pub const DEFAULT_ASSOCIATION_ROT_TOLERANCE: f64 = 1e-3;
/// Relative-pose change (m) below which cached correspondences are reused.
pub const DEFAULT_ASSOCIATION_TRANS_TOLERANCE: f64 = 5e-3;

/// Matching cost between a source frame and a target voxel map.
///
/// Correspondences are searched at linearization time, unless the relative
/// pose is within the association tolerance of the previous search, and
/// cost evaluations reuse them. An optimizer thus compares trial steps on
/// one fixed set of matches; misses contribute nothing, so costs under
/// different match sets are not comparable.
///
/// Binary form connects both poses; unary form holds the target pose fixed.
/// Either key may name a pose or a full state; only its pose part is used.
pub struct MatchingCostFactor {
    keys: Vec<Key>,
    source: Arc<Frame>,
    target: Arc<GaussianVoxelMap>,
    fixed_target: Option<Se3Pose>,
    rot_tolerance: f64,
    trans_tolerance: f64,
    association: Mutex<Option<Arc<Association>>>,
}

impl Clone for MatchingCostFactor {
    fn clone(&self) -> Self {
        Self {
            keys: self.keys.clone(),
            source: self.source.clone(),
            target: self.target.clone(),
            fixed_target: self.fixed_target,
            rot_tolerance: self.rot_tolerance,
            trans_tolerance: self.trans_tolerance,
            association: Mutex::new(self.cached()),
        }
    }
}

impl MatchingCostFactor {
    fn with_keys(
        keys: Vec<Key>,
        source: Arc<Frame>,
        target: Arc<GaussianVoxelMap>,
        fixed_target: Option<Se3Pose>,
    ) -> Self {
        Self {
            keys,
            source,
            target,
            fixed_target,
            rot_tolerance: DEFAULT_ASSOCIATION_ROT_TOLERANCE,
            trans_tolerance: DEFAULT_ASSOCIATION_TRANS_TOLERANCE,
            association: Mutex::new(None),
        }
    }

    pub fn binary(source_key: Key, target_key: Key, source: Arc<Frame>, target: Arc<GaussianVoxelMap>) -> Self {
        Self::with_keys(vec![source_key, target_key], source, target, None)
    }

    pub fn unary(source_key: Key, source: Arc<Frame>, target: Arc<GaussianVoxelMap>, target_pose: Se3Pose) -> Self {
        Self::with_keys(vec![source_key], source, target, Some(target_pose))
    }

    /// Sets the rotation (rad) and translation (m) association tolerances.
    pub fn with_association_tolerance(mut self, rot: f64, trans: f64) -> Self {
        self.rot_tolerance = rot;
        self.trans_tolerance = trans;
        self
    }

    fn cached(&self) -> Option<Arc<Association>> {
        self.association.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn poses(&self, values: &Values) -> Result<(Se3Pose, Se3Pose)> {
        let t_i = *values.pose(&self.keys[0])?;
        let t_j = match self.fixed_target {
            Some(p) => p,
            None => *values.pose(&self.keys[1])?,
        };
        Ok((t_i, t_j))
    }

    /// Correspondences valid at `t_ij`, searching again when needed.
    fn association_at(&self, t_ij: &Se3Pose) -> Arc<Association> {
        if let Some(a) = self.cached() {
            if a.is_valid_at(t_ij, self.rot_tolerance, self.trans_tolerance) {
                return a;
            }
        }
        let fresh = Arc::new(associate(&self.source, &self.target, t_ij));
        *self.association.lock().unwrap_or_else(|e| e.into_inner()) = Some(fresh.clone());
        fresh
    }

    /// Blocks of the Gauss-Newton model at the given values.
    pub fn linearize_blocks(&self, values: &Values) -> Result<MatchingCostLinearization> {
        let (t_i, t_j) = self.poses(values)?;
        let assoc = self.association_at(&t_j.inverse().compose(&t_i));
        Ok(linearize_associated(&self.source, &assoc, &t_i, &t_j))
    }

    /// Number of matched points at the given values.
    pub fn inliers(&self, values: &Values) -> Result<usize> {
        let (t_i, t_j) = self.poses(values)?;
        Ok(self.association_at(&t_j.inverse().compose(&t_i)).inliers())
    }
}

impl Factor for MatchingCostFactor {
    fn keys(&self) -> &[Key] {
        &self.keys
    }

    fn kind(&self) -> &'static str {
        if self.fixed_target.is_some() {
            "matching-cost-unary"
        } else {
            "matching-cost-binary"
        }
    }

    /// Cost under the correspondences of the latest linearization, so that
    /// trial steps are compared on one fixed set of matches.
    fn cost(&self, values: &Values) -> Result<f64> {
        let (t_i, t_j) = self.poses(values)?;
        let t_ij = t_j.inverse().compose(&t_i);
        let assoc = match self.cached() {
            Some(a) => a,
            None => self.association_at(&t_ij),
        };
        Ok(associated_cost(&self.source, &assoc, &t_ij))
    }

    fn linearize(&self, values: &Values) -> Result<Linearization> {
        self.assemble(values, self.linearize_blocks(values)?)
    }

    fn linearize_observability(&self, values: &Values) -> Result<Linearization> {
        let (t_i, t_j) = self.poses(values)?;
        let assoc = self.association_at(&t_j.inverse().compose(&t_i));
        self.assemble(values, linearize_associated_normal(&self.source, &assoc, &t_i, &t_j))
    }
}

impl MatchingCostFactor {
    fn assemble(&self, values: &Values, blocks: MatchingCostLinearization) -> Result<Linearization> {
        let offs = local_offsets(values, &self.keys)?;
        let dim: usize = offs.iter().map(|o| o.1).sum();
        let mut lin = Linearization::zeros(dim);
        lin.cost = blocks.cost;
        // Pose tangent occupies the first six entries of both pose and state
        // variables.
        let (oi, _) = offs[0];
        lin.hessian.view_mut((oi, oi), (6, 6)).copy_from(&blocks.h_ii);
        lin.gradient.rows_mut(oi, 6).copy_from(&blocks.b_i);
        if self.fixed_target.is_none() {
            let (oj, _) = offs[1];
            lin.hessian.view_mut((oj, oj), (6, 6)).copy_from(&blocks.h_jj);
            lin.hessian.view_mut((oi, oj), (6, 6)).copy_from(&blocks.h_ij);
            lin.hessian
                .view_mut((oj, oi), (6, 6))
                .copy_from(&blocks.h_ij.transpose());
            lin.gradient.rows_mut(oj, 6).copy_from(&blocks.b_j);
        }
        Ok(lin)
    }
}
