use std::collections::HashMap;

use nalgebra::{Matrix3, Vector3};

use crate::geometry::Gaussian3;
use crate::preprocess::Frame;

pub type VoxelKey = [i64; 3];

/// Integer cell index of a position on a grid of the given resolution.
pub fn voxel_key(p: &Vector3<f64>, resolution: f64) -> VoxelKey {
    [
        (p.x / resolution).floor() as i64,
        (p.y / resolution).floor() as i64,
        (p.z / resolution).floor() as i64,
    ]
}

/// Aggregated Gaussian of the points inside one voxel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelCell {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub count: usize,
}

impl VoxelCell {
    pub fn gaussian(&self) -> Gaussian3 {
        Gaussian3::new(self.mean, self.cov)
    }
}

/// Voxel grid holding one Gaussian per occupied cell.
#[derive(Clone, Debug, Default)]
pub struct GaussianVoxelMap {
    pub resolution: f64,
    cells: HashMap<VoxelKey, VoxelCell>,
}

impl GaussianVoxelMap {
    /// Aggregates the frame's point Gaussians per cell. Cell covariance is
    /// the mean point covariance plus the scatter of the point means.
    pub fn build(frame: &Frame, resolution: f64) -> Self {
        assert!(resolution > 0.0);
        assert!(
            frame.is_empty() || frame.has_covariances(),
            "voxel map needs point covariances"
        );
        let mut groups: HashMap<VoxelKey, Vec<usize>> = HashMap::new();
        for (i, p) in frame.points.iter().enumerate() {
            groups.entry(voxel_key(p, resolution)).or_default().push(i);
        }
        let cells = groups
            .into_iter()
            .map(|(key, members)| {
                let n = members.len() as f64;
                let mean = members.iter().map(|&i| frame.points[i]).sum::<Vector3<f64>>() / n;
                let cov = members
                    .iter()
                    .map(|&i| {
                        let d = frame.points[i] - mean;
                        frame.covs[i] + d * d.transpose()
                    })
                    .sum::<Matrix3<f64>>()
                    / n;
                (
                    key,
                    VoxelCell {
                        mean,
                        cov: 0.5 * (cov + cov.transpose()),
                        count: members.len(),
                    },
                )
            })
            .collect();
        Self { resolution, cells }
    }

    pub fn lookup(&self, p: &Vector3<f64>) -> Option<&VoxelCell> {
        self.cells.get(&voxel_key(p, self.resolution))
    }

    pub fn cell(&self, key: &VoxelKey) -> Option<&VoxelCell> {
        self.cells.get(key)
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        self.cells.contains_key(&voxel_key(p, self.resolution))
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Cells in ascending key order.
    pub fn sorted_cells(&self) -> Vec<(VoxelKey, VoxelCell)> {
        let mut v: Vec<_> = self.cells.iter().map(|(k, c)| (*k, *c)).collect();
        v.sort_by_key(|(k, _)| *k);
        v
    }

    /// Adds every cell of `other` not already present (same resolution).
    pub fn absorb(&mut self, other: &GaussianVoxelMap) {
        assert_eq!(self.resolution, other.resolution);
        for (k, c) in &other.cells {
            self.cells.entry(*k).or_insert(*c);
        }
    }
}
