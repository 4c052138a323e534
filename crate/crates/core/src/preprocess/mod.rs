//! Scan preparation: voxel downsampling with timestamp-aware cells, exact
//! k-nearest-neighbor search, plane-regularized point covariances and
//! IMU-predicted deskewing.

mod covariance;
mod deskew;
mod downsample;
mod kdtree;

use nalgebra::{Matrix3, Vector3};

pub use covariance::{estimate_covariances, plane_covariance, DEFAULT_PLANE_EPSILON};
pub use deskew::{deskew, integrate_poses, DEFAULT_MAX_IMU_GAP};
pub use downsample::voxel_downsample;
pub use kdtree::KdTree;

use crate::error::{Error, Result};

/// A point with its absolute capture time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimedPoint {
    pub pos: Vector3<f64>,
    pub stamp: f64,
}

impl TimedPoint {
    pub fn new(pos: Vector3<f64>, stamp: f64) -> Self {
        Self { pos, stamp }
    }
}

/// One sweep of the sensor as delivered by the driver.
#[derive(Clone, Debug, PartialEq)]
pub struct RawScan {
    pub points: Vec<TimedPoint>,
    pub scan_start: f64,
    pub scan_end: f64,
}

impl RawScan {
    pub fn new(points: Vec<TimedPoint>, scan_start: f64, scan_end: f64) -> Self {
        Self {
            points,
            scan_start,
            scan_end,
        }
    }

    /// Builds a scan whose bounds are the min/max point stamps.
    pub fn from_points(points: Vec<TimedPoint>) -> Self {
        let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.stamp), hi.max(p.stamp))
        });
        let (lo, hi) = if points.is_empty() { (0.0, 0.0) } else { (lo, hi) };
        Self::new(points, lo, hi)
    }

    pub fn duration(&self) -> f64 {
        self.scan_end - self.scan_start
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Fixed-size neighbor lists stored row-major (`k` entries per point).
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbors {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl Neighbors {
    pub fn of(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }
}

/// A downsampled scan in the sensor frame, optionally deskewed and annotated
/// with per-point covariances.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// Reference time; after deskewing every point is expressed in the
    /// sensor frame at this instant.
    pub stamp: f64,
    pub scan_end: f64,
    pub points: Vec<Vector3<f64>>,
    pub times: Vec<f64>,
    pub covs: Vec<Matrix3<f64>>,
    pub neighbors: Option<Neighbors>,
    /// Points whose neighborhood collapsed to a single location.
    pub degenerate: Vec<bool>,
    pub deskewed: bool,
}

impl Frame {
    pub fn from_scan(scan: &RawScan) -> Self {
        Self {
            stamp: scan.scan_start,
            scan_end: scan.scan_end,
            points: scan.points.iter().map(|p| p.pos).collect(),
            times: scan.points.iter().map(|p| p.stamp).collect(),
            covs: Vec::new(),
            neighbors: None,
            degenerate: Vec::new(),
            deskewed: false,
        }
    }

    /// A frame that already carries covariances (e.g. a merged submap cloud).
    pub fn with_covariances(stamp: f64, points: Vec<Vector3<f64>>, covs: Vec<Matrix3<f64>>) -> Self {
        assert_eq!(points.len(), covs.len());
        let n = points.len();
        Self {
            stamp,
            scan_end: stamp,
            times: vec![stamp; n],
            degenerate: vec![false; n],
            points,
            covs,
            neighbors: None,
            deskewed: true,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn has_covariances(&self) -> bool {
        !self.points.is_empty() && self.covs.len() == self.points.len()
    }
}

/// Computes exact k-NN lists for every point of the frame (self included).
pub fn knn_search(frame: &Frame, k: usize) -> Result<Neighbors> {
    if frame.len() < k || k == 0 {
        return Err(Error::FrameTooSparse { points: frame.len(), k });
    }
    let tree = KdTree::build(&frame.points);
    let indices = crate::par::map_chunks(&frame.points, |p| tree.knn(p, k))
        .into_iter()
        .flatten()
        .collect();
    Ok(Neighbors { k, indices })
}

/// Settings for turning a raw scan into a neighbor-annotated frame.
#[derive(Clone, Debug)]
pub struct PreprocessConfig {
    pub downsample_resolution: f64,
    pub k_neighbors: usize,
    pub plane_epsilon: f64,
    pub max_imu_gap: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            downsample_resolution: 0.25,
            k_neighbors: 10,
            plane_epsilon: DEFAULT_PLANE_EPSILON,
            max_imu_gap: DEFAULT_MAX_IMU_GAP,
        }
    }
}

/// Downsamples a raw scan and precomputes neighbor lists. Deskewing and
/// covariance estimation happen later, once a motion prediction exists.
pub fn prepare_frame(scan: &RawScan, config: &PreprocessConfig) -> Result<Frame> {
    let down = voxel_downsample(scan, config.downsample_resolution);
    let mut frame = Frame::from_scan(&down);
    frame.neighbors = Some(knn_search(&frame, config.k_neighbors)?);
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_frame(xs: &[f64]) -> Frame {
        let pts = xs
            .iter()
            .map(|&x| TimedPoint::new(Vector3::new(x, 0.0, 0.0), 0.0))
            .collect();
        Frame::from_scan(&RawScan::new(pts, 0.0, 0.1))
    }

    #[test]
    fn knn_on_a_line() {
        let f = line_frame(&[0.0, 1.0, 2.0, 3.0]);
        let nn = knn_search(&f, 2).unwrap();
        assert_eq!(nn.of(0), &[0, 1]);
        assert_eq!(nn.of(3), &[3, 2]);
    }

    #[test]
    fn knn_with_k_equal_to_size_is_a_permutation() {
        let f = line_frame(&[0.0, 5.0, 1.0, -2.0, 0.5]);
        let nn = knn_search(&f, 5).unwrap();
        for i in 0..5 {
            let mut l = nn.of(i).to_vec();
            l.sort();
            assert_eq!(l, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn knn_duplicates_prefer_lower_index() {
        let f = line_frame(&[1.0, 1.0, 1.0, 4.0]);
        let nn = knn_search(&f, 2).unwrap();
        assert_eq!(nn.of(0), &[0, 1]);
        assert_eq!(nn.of(1), &[0, 1]);
        assert_eq!(nn.of(2), &[0, 1]);
    }

    #[test]
    fn knn_rejects_sparse_frames() {
        let f = line_frame(&[0.0, 1.0]);
        assert!(matches!(
            knn_search(&f, 3),
            Err(Error::FrameTooSparse { points: 2, k: 3 })
        ));
    }
}
