//! File formats: scan sequences, IMU CSV, trajectories, configuration and
//! map export.

mod scans;
mod text;

use std::fs;
use std::path::Path;

use nalgebra::Vector3;

pub use scans::{
    encode_scan, list_scan_files, parse_scan, read_scan, write_scan, write_scan_sequence, ScanSequence, DEFAULT_HEADER,
    SCAN_EXTENSION,
};
pub use text::{
    format_record, format_significant, parse_imu_csv, parse_trajectory, read_imu_csv, read_trajectory, write_imu_csv,
    write_trajectory, IMU_HEADER,
};

use crate::error::Result;
use crate::metrics::TrajectoryRecord;
use crate::pipeline::PipelineConfig;
use crate::preprocess::{RawScan, TimedPoint};
use crate::synth::Dataset;

/// File names inside a dataset directory.
pub const SCANS_DIR: &str = "scans";
pub const IMU_FILE: &str = "imu.csv";
pub const GROUND_TRUTH_FILE: &str = "groundtruth.txt";

/// Reads every scan of a sequence directory.
pub fn read_scan_sequence(dir: &Path) -> Result<Vec<RawScan>> {
    ScanSequence::open(dir)?.collect()
}

pub fn read_config(path: &Path) -> Result<PipelineConfig> {
    PipelineConfig::from_toml(&fs::read_to_string(path)?)
}

/// Writes map points in the scan format with zero stamps.
pub fn write_map(points: &[Vector3<f64>], path: &Path) -> Result<()> {
    let scan = RawScan::new(points.iter().map(|p| TimedPoint::new(*p, 0.0)).collect(), 0.0, 0.0);
    write_scan(&scan, path)
}

pub fn read_map(path: &Path) -> Result<Vec<Vector3<f64>>> {
    Ok(read_scan(path)?.points.into_iter().map(|p| p.pos).collect())
}

/// Writes a dataset as `scans/`, `imu.csv` and `groundtruth.txt` under `dir`.
pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_scan_sequence(&data.scans, &dir.join(SCANS_DIR))?;
    write_imu_csv(&data.imu, &dir.join(IMU_FILE))?;
    let gt: Vec<TrajectoryRecord> = data.ground_truth.iter().map(|&g| g.into()).collect();
    write_trajectory(&gt, &dir.join(GROUND_TRUTH_FILE))
}
