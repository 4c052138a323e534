use nalgebra::Vector3;

use super::Frame;
use crate::error::{Error, Result};
use crate::geometry::{Se3Pose, SensorState};
use crate::imu::{integration_nodes, propagate_state, ImuSample};

/// Largest tolerated spacing between IMU samples inside a scan (seconds).
pub const DEFAULT_MAX_IMU_GAP: f64 = 0.02;

/// Integrates the state across the IMU nodes covering `[state.stamp, t_end]`
/// and returns the pose at each node.
pub fn integrate_poses(
    state: &SensorState,
    imu: &[ImuSample],
    t_end: f64,
    gravity: &Vector3<f64>,
    max_gap: f64,
) -> Result<Vec<(f64, Se3Pose)>> {
    if t_end <= state.stamp {
        return Ok(vec![(state.stamp, state.pose)]);
    }
    let nodes = integration_nodes(imu, state.stamp, t_end, max_gap)?;
    let mut out = Vec::with_capacity(nodes.len());
    let mut s = *state;
    out.push((s.stamp, s.pose));
    for w in nodes.windows(2) {
        let dt = w[1].stamp - w[0].stamp;
        if dt <= 0.0 {
            continue;
        }
        s = propagate_state(&s, &w[0], dt, gravity);
        out.push((w[1].stamp, s.pose));
    }
    Ok(out)
}

fn pose_at(trajectory: &[(f64, Se3Pose)], t: f64) -> Se3Pose {
    let idx = trajectory.partition_point(|(s, _)| *s <= t);
    if idx == 0 {
        return trajectory[0].1;
    }
    if idx == trajectory.len() {
        return trajectory[idx - 1].1;
    }
    let (t0, p0) = trajectory[idx - 1];
    let (t1, p1) = trajectory[idx];
    p0.interpolate(&p1, (t - t0) / (t1 - t0))
}

/// Re-expresses every point in the sensor frame at `frame.stamp`, using the
/// IMU-predicted motion from `state` (which must be the state at that stamp).
pub fn deskew(
    frame: &Frame,
    imu: &[ImuSample],
    state: &SensorState,
    gravity: &Vector3<f64>,
    max_gap: f64,
) -> Result<Frame> {
    if frame.deskewed {
        return Err(Error::OutOfOrder("frame is already deskewed".into()));
    }
    let mut s0 = *state;
    s0.stamp = frame.stamp;
    let t_end = frame.times.iter().copied().fold(frame.scan_end, f64::max);
    let trajectory = integrate_poses(&s0, imu, t_end, gravity, max_gap)?;
    let origin_inv = trajectory[0].1.inverse();
    let points = crate::par::map_chunks(&(0..frame.len()).collect::<Vec<_>>(), |&i| {
        let rel = origin_inv.compose(&pose_at(&trajectory, frame.times[i]));
        rel.apply(&frame.points[i])
    });
    let mut out = frame.clone();
    out.points = points;
    out.deskewed = true;
    Ok(out)
}
