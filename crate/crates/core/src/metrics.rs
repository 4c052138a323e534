//! Trajectory accuracy: absolute trajectory error after rigid alignment and
//! relative error over fixed ground-truth distances.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::geometry::Se3Pose;
use crate::{Error, Result};

/// Maximum stamp difference for associating two poses.
pub const ASSOCIATION_TOLERANCE: f64 = 0.05;

/// One timestamped pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub stamp: f64,
    pub pose: Se3Pose,
}

impl TrajectoryRecord {
    pub fn new(stamp: f64, pose: Se3Pose) -> Self {
        Self { stamp, pose }
    }
}

impl From<(f64, Se3Pose)> for TrajectoryRecord {
    fn from((stamp, pose): (f64, Se3Pose)) -> Self {
        Self { stamp, pose }
    }
}

#[derive(Clone, Debug)]
pub struct AteResult {
    pub rmse: f64,
    /// Translational error per associated pair, in estimate order.
    pub errors: Vec<f64>,
    /// Transform applied to the estimate before comparison.
    pub alignment: Se3Pose,
}

#[derive(Clone, Debug)]
pub struct RteResult {
    pub mean: f64,
    pub std: f64,
    pub errors: Vec<f64>,
}

/// Pairs each estimate pose with the nearest ground-truth stamp within
/// [`ASSOCIATION_TOLERANCE`].
pub fn associate(estimate: &[TrajectoryRecord], ground_truth: &[TrajectoryRecord]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, e) in estimate.iter().enumerate() {
        let j = ground_truth.partition_point(|g| g.stamp < e.stamp);
        let best = [j.wrapping_sub(1), j]
            .into_iter()
            .filter(|&k| k < ground_truth.len())
            .min_by(|&a, &b| {
                let da = (ground_truth[a].stamp - e.stamp).abs();
                let db = (ground_truth[b].stamp - e.stamp).abs();
                da.total_cmp(&db)
            });
        if let Some(k) = best {
            if (ground_truth[k].stamp - e.stamp).abs() <= ASSOCIATION_TOLERANCE {
                pairs.push((i, k));
            }
        }
    }
    pairs
}

/// Least-squares rigid transform `T` minimizing `Σ‖dst − T·src‖²`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Se3Pose {
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut sigma = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        sigma += (d - mu_d) * (s - mu_s).transpose();
    }
    sigma /= n;
    let svd = sigma.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let rot = UnitQuaternion::from_matrix(&r);
    Se3Pose::new(rot, mu_d - rot * mu_s)
}

/// Absolute trajectory error; with `align` the estimate is first moved by
/// the best rigid transform onto the ground truth.
pub fn compute_ate(estimate: &[TrajectoryRecord], ground_truth: &[TrajectoryRecord], align: bool) -> Result<AteResult> {
    let pairs = associate(estimate, ground_truth);
    if pairs.len() < 3 {
        return Err(Error::InsufficientOverlap { pairs: pairs.len() });
    }
    let src: Vec<_> = pairs.iter().map(|&(i, _)| estimate[i].pose.trans).collect();
    let dst: Vec<_> = pairs.iter().map(|&(_, j)| ground_truth[j].pose.trans).collect();
    let alignment = if align {
        umeyama(&src, &dst)
    } else {
        Se3Pose::identity()
    };
    let errors: Vec<f64> = src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (alignment.apply(s) - d).norm())
        .collect();
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
    Ok(AteResult {
        rmse,
        errors,
        alignment,
    })
}

/// Pose at `t` by interpolation between the bracketing records.
pub fn interpolate_pose(traj: &[TrajectoryRecord], t: f64) -> Option<Se3Pose> {
    let first = traj.first()?;
    let last = traj.last()?;
    if t < first.stamp - ASSOCIATION_TOLERANCE || t > last.stamp + ASSOCIATION_TOLERANCE {
        return None;
    }
    let j = traj.partition_point(|r| r.stamp < t);
    if j == 0 {
        return Some(first.pose);
    }
    if j == traj.len() {
        return Some(last.pose);
    }
    let (a, b) = (&traj[j - 1], &traj[j]);
    let alpha = (t - a.stamp) / (b.stamp - a.stamp);
    Some(a.pose.interpolate(&b.pose, alpha))
}

/// Relative translational error over ground-truth segments of
/// `segment_length` meters, one segment per ground-truth record.
pub fn compute_rte(
    estimate: &[TrajectoryRecord],
    ground_truth: &[TrajectoryRecord],
    segment_length: f64,
) -> Result<RteResult> {
    let mut arc = Vec::with_capacity(ground_truth.len());
    let mut acc = 0.0;
    for (k, r) in ground_truth.iter().enumerate() {
        if k > 0 {
            acc += (r.pose.trans - ground_truth[k - 1].pose.trans).norm();
        }
        arc.push(acc);
    }
    if acc < segment_length || ground_truth.len() < 2 {
        return Err(Error::InsufficientLength {
            length: acc,
            segment: segment_length,
        });
    }

    let mut errors = Vec::new();
    for (i, start) in ground_truth.iter().enumerate() {
        let target = arc[i] + segment_length;
        if target > acc {
            break;
        }
        let j = arc.partition_point(|&s| s < target);
        let (end_stamp, gt_end) = if arc[j] == target || j == 0 {
            (ground_truth[j].stamp, ground_truth[j].pose)
        } else {
            let alpha = (target - arc[j - 1]) / (arc[j] - arc[j - 1]);
            let a = &ground_truth[j - 1];
            let b = &ground_truth[j];
            (
                a.stamp + alpha * (b.stamp - a.stamp),
                a.pose.interpolate(&b.pose, alpha),
            )
        };
        let (Some(e0), Some(e1)) = (
            interpolate_pose(estimate, start.stamp),
            interpolate_pose(estimate, end_stamp),
        ) else {
            continue;
        };
        let rel_gt = start.pose.between(&gt_end);
        let rel_est = e0.between(&e1);
        errors.push(rel_gt.between(&rel_est).trans.norm());
    }
    if errors.is_empty() {
        return Err(Error::InsufficientOverlap { pairs: 0 });
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let std = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(RteResult { mean, std, errors })
}
