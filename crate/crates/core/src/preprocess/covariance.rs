use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use super::Frame;
use crate::error::{Error, Result};

pub const DEFAULT_PLANE_EPSILON: f64 = 1e-3;

/// Sample covariances below this Frobenius norm are treated as a collapsed
/// neighborhood.
const DEGENERATE_NORM: f64 = 1e-12;

/// Regularized covariance with eigenvalues `(1, 1, ε)` and the smallest
/// eigenvector along `normal`.
pub fn plane_covariance(normal: &Vector3<f64>, epsilon: f64) -> Matrix3<f64> {
    let n = normal.normalize();
    Matrix3::identity() - (1.0 - epsilon) * n * n.transpose()
}

/// Replaces each point's covariance with the plane-regularized covariance of
/// its precomputed neighborhood.
///
/// Neighbor lists may have been computed before deskewing; only the
/// positions are re-read.
pub fn estimate_covariances(mut frame: Frame, epsilon: f64) -> Result<Frame> {
    let neighbors = frame.neighbors.as_ref().ok_or(Error::FrameTooSparse {
        points: frame.len(),
        k: 0,
    })?;
    let results = crate::par::map_chunks(&(0..frame.len()).collect::<Vec<_>>(), |&i| {
        let nn = neighbors.of(i);
        let mean = nn.iter().map(|&j| frame.points[j]).sum::<Vector3<f64>>() / nn.len() as f64;
        let mut cov = Matrix3::zeros();
        for &j in nn {
            let d = frame.points[j] - mean;
            cov += d * d.transpose();
        }
        cov /= nn.len() as f64;
        if cov.norm() < DEGENERATE_NORM {
            return (Matrix3::identity() * epsilon, true);
        }
        let eig = SymmetricEigen::new(cov);
        let normal = eig.eigenvectors.column(eig.eigenvalues.imin()).into_owned();
        (plane_covariance(&normal, epsilon), false)
    });
    let (covs, flags) = results.into_iter().unzip();
    frame.covs = covs;
    frame.degenerate = flags;
    Ok(frame)
}
