//! Odometry, local mapping and global mapping driven stage by stage over a
//! synthetic circle in a box room.

use std::collections::BTreeSet;

use limap::global_mapping::{GlobalMapper, GlobalMappingConfig};
use limap::local_mapping::{LocalMappingConfig, Submap, SubmapBuilder};
use limap::metrics::{compute_ate, TrajectoryRecord};
use limap::odometry::{FrameEstimate, MarginalizedFrame, Odometry, OdometryConfig};
use limap::pipeline::PipelineConfig;
use limap::synth::{generate, Dataset, SceneSpec};
use limap::Error;

struct Frontend {
    estimates: Vec<FrameEstimate>,
    marginalized: Vec<MarginalizedFrame>,
    peak_window: usize,
    peak_keyframes: usize,
}

fn run_odometry(data: &Dataset, config: OdometryConfig) -> Frontend {
    let mut odometry = Odometry::new(config).unwrap();
    let mut out = Frontend {
        estimates: Vec::new(),
        marginalized: Vec::new(),
        peak_window: 0,
        peak_keyframes: 0,
    };
    let mut next_imu = 0;
    for scan in &data.scans {
        while let Some(&s) = data.imu.get(next_imu) {
            odometry.push_imu(s).unwrap();
            next_imu += 1;
            if s.stamp >= scan.scan_end {
                break;
            }
        }
        if let Some((estimate, marginalized)) = odometry.process_scan(scan).unwrap() {
            out.estimates.push(estimate);
            out.marginalized.extend(marginalized);
        }
        out.peak_window = out.peak_window.max(odometry.window_len());
        out.peak_keyframes = out.peak_keyframes.max(odometry.keyframes().len());
    }
    out.marginalized.extend(odometry.finish().unwrap());
    out
}

fn truth(data: &Dataset) -> Vec<TrajectoryRecord> {
    data.ground_truth.iter().map(|&g| g.into()).collect()
}

fn build_submaps(frames: Vec<MarginalizedFrame>, config: LocalMappingConfig) -> Vec<Submap> {
    let mut builder = SubmapBuilder::new(config).unwrap();
    let mut submaps = Vec::new();
    for mf in frames {
        submaps.extend(builder.insert_frame(mf).unwrap());
    }
    submaps.extend(builder.flush().unwrap());
    submaps
}

#[test]
fn odometry_tracks_a_circle() {
    let data = generate(&SceneSpec::box_room_circle(60)).unwrap();
    let config = PipelineConfig::default().odometry();
    let (window, budget) = (config.window, config.keyframes.max_keyframes);
    let front = run_odometry(&data, config);

    assert!(front.estimates.len() > 40);
    assert!(front.peak_window <= window);
    assert!(front.peak_keyframes <= budget);

    // Every estimated frame is marginalized exactly once, in order.
    let ids: Vec<usize> = front.marginalized.iter().map(|m| m.id).collect();
    assert_eq!(ids.len(), front.estimates.len());
    assert!(ids.windows(2).all(|w| w[0] < w[1]));

    let estimate: Vec<TrajectoryRecord> = front
        .estimates
        .iter()
        .map(|e| TrajectoryRecord::new(e.state.stamp, e.state.pose))
        .collect();
    let ate = compute_ate(&estimate, &truth(&data), true).unwrap();
    assert!(ate.rmse < 0.05, "odometry ATE {}", ate.rmse);
}

#[test]
fn lidar_only_odometry_tracks_a_circle() {
    let data = generate(&SceneSpec::box_room_circle(60)).unwrap();
    let config = PipelineConfig {
        use_imu: false,
        ..Default::default()
    };
    let front = run_odometry(&data, config.odometry());
    let estimate: Vec<TrajectoryRecord> = front
        .estimates
        .iter()
        .map(|e| TrajectoryRecord::new(e.state.stamp, e.state.pose))
        .collect();
    let ate = compute_ate(&estimate, &truth(&data), true).unwrap();
    assert!(ate.rmse < 0.1, "LiDAR-only ATE {}", ate.rmse);
}

#[test]
fn invalid_odometry_config_is_rejected() {
    let mut config = OdometryConfig::default();
    config.keyframes.drop_overlap = 0.95;
    assert!(matches!(Odometry::new(config), Err(Error::Config(_))));
}

#[test]
fn submaps_respect_their_limits() {
    let data = generate(&SceneSpec::box_room_circle(60)).unwrap();
    let front = run_odometry(&data, PipelineConfig::default().odometry());
    let frames = front.marginalized.len();
    let estimate: Vec<TrajectoryRecord> = front
        .estimates
        .iter()
        .map(|e| TrajectoryRecord::new(e.state.stamp, e.state.pose))
        .collect();
    // Odometry runs in its own gravity-aligned frame.
    let to_truth = compute_ate(&estimate, &truth(&data), true).unwrap().alignment;
    let config = LocalMappingConfig {
        max_frames: 4,
        ..PipelineConfig::default().local_mapping()
    };
    let limit = config.max_frames;
    let submaps = build_submaps(front.marginalized, config);

    assert!(submaps.len() > 1);
    let gt = truth(&data);
    for (k, s) in submaps.iter().enumerate() {
        assert_eq!(s.id, k);
        assert!(!s.members.is_empty() && s.members.len() <= limit);
        assert!(s.members.windows(2).all(|w| w[0] < w[1]));
        assert!(s.left_stamp <= s.origin_stamp && s.origin_stamp <= s.right_stamp);
        assert!(!s.merged.is_empty() && s.frame.len() <= s.merged.len());

        // The refined origin sits where the sensor was.
        let nearest = gt
            .iter()
            .min_by(|a, b| {
                (a.stamp - s.origin_stamp)
                    .abs()
                    .total_cmp(&(b.stamp - s.origin_stamp).abs())
            })
            .unwrap();
        assert!((nearest.pose.trans - to_truth.compose(&s.origin).trans).norm() < 0.05);

        // Endpoints expressed relative to the origin map back to world states
        // at their own stamps.
        assert_eq!(s.endpoint_world(&s.origin, false).stamp, s.left_stamp);
        assert_eq!(s.endpoint_world(&s.origin, true).stamp, s.right_stamp);
    }
    // Every frame received by local mapping appears in exactly one submap
    // trajectory.
    let covered: usize = submaps.iter().map(|s| s.trajectory.len()).sum();
    assert_eq!(covered, frames);
}

#[test]
fn inconsistent_submap_overlaps_are_rejected() {
    let config = LocalMappingConfig {
        min_first_last_overlap: 0.95,
        ..Default::default()
    };
    assert!(matches!(SubmapBuilder::new(config), Err(Error::Config(_))));
}

#[test]
fn global_mapping_links_overlapping_submaps() {
    let data = generate(&SceneSpec::box_room_circle(80)).unwrap();
    let front = run_odometry(&data, PipelineConfig::default().odometry());
    let config = LocalMappingConfig {
        max_frames: 4,
        ..PipelineConfig::default().local_mapping()
    };
    let submaps = build_submaps(front.marginalized, config);
    let count = submaps.len();
    assert!(count >= 3, "only {count} submaps");

    let mut mapper = GlobalMapper::new(PipelineConfig::default().global_mapping()).unwrap();
    for s in submaps {
        mapper.insert_submap(s).unwrap();
    }
    mapper.finish().unwrap();
    assert_eq!(mapper.submaps().len(), count);
    assert_eq!(mapper.failures(), 0);

    // Pairs are (newer, older) and consecutive submaps in a small room always overlap.
    let pairs: &BTreeSet<(usize, usize)> = mapper.matching_pairs();
    assert!(pairs.iter().all(|&(i, j)| i > j && i < count));
    assert!((1..count).all(|i| pairs.contains(&(i, i - 1))));

    let trajectory: Vec<TrajectoryRecord> = mapper.trajectory().unwrap().into_iter().map(Into::into).collect();
    let ate = compute_ate(&trajectory, &truth(&data), true).unwrap();
    assert!(ate.rmse < 0.05, "global ATE {}", ate.rmse);
    assert!(!mapper.map_points().unwrap().is_empty());

    let mut dump = Vec::new();
    mapper.dump_graph(&mut dump).unwrap();
    assert!(!dump.is_empty());
}

#[test]
fn global_mapper_rejects_nonpositive_cadence() {
    let config = GlobalMappingConfig {
        optimize_every: 0,
        ..Default::default()
    };
    assert!(GlobalMapper::new(config).is_err());
}
