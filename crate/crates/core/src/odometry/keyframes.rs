use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::geometry::{Se3Pose, SensorState};
use crate::preprocess::Frame;
use crate::registration::{overlap_rate, GaussianVoxelMap};

/// A retained frame that anchors matching-cost factors for later frames.
#[derive(Clone, Debug)]
pub struct Keyframe {
    /// Index of the frame in the odometry sequence.
    pub id: usize,
    pub frame: Arc<Frame>,
    pub voxelmap: Arc<GaussianVoxelMap>,
    pub state: SensorState,
    /// Left the smoothing window; the pose is now a constant.
    pub marginalized: bool,
}

/// Removal score of keyframe `i` given the pairwise overlap matrix, where
/// `o[(a, b)]` is the fraction of keyframe `a`'s points inside keyframe
/// `b`'s voxel map and the last row/column is the latest keyframe.
///
/// `s(i) = o(i, latest) · Σ_{j ∉ {first, i, latest}} (1 − o(i, j))`.
pub fn keyframe_score(i: usize, overlap: &DMatrix<f64>) -> f64 {
    let n = overlap.nrows();
    assert!(
        n >= 3 && i >= 1 && i + 1 < n,
        "scored keyframes exclude the first and the latest"
    );
    let spread: f64 = (1..n - 1).filter(|&j| j != i).map(|j| 1.0 - overlap[(i, j)]).sum();
    overlap[(i, n - 1)] * spread
}

/// Position of the lowest-scoring keyframe; ties go to the oldest.
pub fn removal_candidate(overlap: &DMatrix<f64>) -> usize {
    let n = overlap.nrows();
    let mut best = 1;
    let mut best_score = f64::INFINITY;
    for i in 1..n - 1 {
        let s = keyframe_score(i, overlap);
        if s < best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

/// One score-based removal, recorded for inspection.
#[derive(Clone, Debug)]
pub struct KeyframeRemoval {
    /// Frame ids of the keyframes before removal, oldest first.
    pub ids: Vec<usize>,
    pub overlap: DMatrix<f64>,
    /// Position (into `ids`) of the removed keyframe.
    pub removed: usize,
}

/// Thresholds of the keyframe policy.
#[derive(Clone, Copy, Debug)]
pub struct KeyframePolicy {
    pub insert_overlap: f64,
    pub drop_overlap: f64,
    pub max_keyframes: usize,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        Self {
            insert_overlap: 0.9,
            drop_overlap: 0.05,
            max_keyframes: 20,
        }
    }
}

/// Keyframe list plus a cache of overlaps between keyframes whose poses
/// are frozen.
#[derive(Clone, Debug, Default)]
pub struct KeyframeSet {
    pub keyframes: Vec<Keyframe>,
    frozen_overlap: HashMap<(usize, usize), f64>,
    pub removals: Vec<KeyframeRemoval>,
    pub record_removals: bool,
}

fn pair_overlap(a: &Keyframe, b: &Keyframe) -> f64 {
    let rel = b.state.pose.inverse().compose(&a.state.pose);
    overlap_rate(&a.frame, &b.voxelmap, &rel)
}

impl KeyframeSet {
    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn latest(&self) -> Option<&Keyframe> {
        self.keyframes.last()
    }

    /// Overlap of a candidate frame at `pose` with the latest keyframe.
    pub fn overlap_with_latest(&self, frame: &Frame, pose: &Se3Pose) -> Option<f64> {
        self.latest()
            .map(|kf| overlap_rate(frame, &kf.voxelmap, &kf.state.pose.inverse().compose(pose)))
    }

    fn overlap(&mut self, a: usize, b: usize) -> f64 {
        let (ka, kb) = (&self.keyframes[a], &self.keyframes[b]);
        if ka.marginalized && kb.marginalized {
            let key = (ka.id, kb.id);
            if let Some(v) = self.frozen_overlap.get(&key) {
                return *v;
            }
            let v = pair_overlap(ka, kb);
            self.frozen_overlap.insert(key, v);
            v
        } else {
            pair_overlap(ka, kb)
        }
    }

    /// Full pairwise overlap matrix of the current keyframes.
    pub fn overlap_matrix(&mut self) -> DMatrix<f64> {
        let n = self.keyframes.len();
        let mut o = DMatrix::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                o[(a, b)] = if a == b { 1.0 } else { self.overlap(a, b) };
            }
        }
        o
    }

    /// Inserts the frame if it overlaps the latest keyframe by less than
    /// the insertion threshold, then applies the removal rules. Returns
    /// whether the frame became a keyframe.
    pub fn update(&mut self, candidate: Keyframe, policy: &KeyframePolicy) -> bool {
        let insert = match self.overlap_with_latest(&candidate.frame, &candidate.state.pose) {
            None => true,
            Some(o) => o < policy.insert_overlap,
        };
        if !insert {
            return false;
        }
        self.keyframes.push(candidate);

        // Keyframes that no longer overlap the latest one.
        let n = self.keyframes.len();
        let latest = n - 1;
        let mut keep = vec![true; n];
        for (i, k) in keep.iter_mut().enumerate().take(latest) {
            if self.overlap(i, latest) < policy.drop_overlap {
                *k = false;
            }
        }
        let mut idx = 0;
        self.keyframes.retain(|_| {
            let k = keep[idx];
            idx += 1;
            k
        });

        while self.keyframes.len() > policy.max_keyframes {
            let overlap = self.overlap_matrix();
            let removed = removal_candidate(&overlap);
            if self.record_removals {
                self.removals.push(KeyframeRemoval {
                    ids: self.keyframes.iter().map(|k| k.id).collect(),
                    overlap,
                    removed,
                });
            }
            self.keyframes.remove(removed);
        }
        let live: std::collections::HashSet<usize> = self.keyframes.iter().map(|k| k.id).collect();
        self.frozen_overlap
            .retain(|(a, b), _| live.contains(a) && live.contains(b));
        true
    }

    /// Freezes the keyframe created from frame `id` at its final estimate.
    pub fn mark_marginalized(&mut self, id: usize, state: &SensorState) {
        if let Some(k) = self.keyframes.iter_mut().find(|k| k.id == id) {
            k.state = *state;
            k.marginalized = true;
        }
    }

    /// Refreshes in-window keyframe states from the latest estimates.
    pub fn refresh_states(&mut self, mut state_of: impl FnMut(usize) -> Option<SensorState>) {
        for k in self.keyframes.iter_mut().filter(|k| !k.marginalized) {
            if let Some(s) = state_of(k.id) {
                k.state = s;
            }
        }
    }
}
