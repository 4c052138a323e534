//! IMU CSV and trajectory text files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Se3Pose;
use crate::imu::ImuSample;
use crate::metrics::TrajectoryRecord;

pub const IMU_HEADER: [&str; 7] = ["t", "ax", "ay", "az", "wx", "wy", "wz"];

fn parse_error(file: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::ParseError {
        file: file.to_path_buf(),
        offset,
        message: message.into(),
    }
}

/// Parses IMU samples from CSV text with a `t,ax,ay,az,wx,wy,wz` header.
/// Columns may appear in any order; extra columns are ignored.
pub fn parse_imu_csv(file: &Path, text: &str) -> Result<Vec<ImuSample>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| parse_error(file, 0, e.to_string()))?
        .clone();
    let mut columns = [0usize; 7];
    for (slot, name) in columns.iter_mut().zip(IMU_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_error(file, 0, format!("missing column {name:?}")))?;
    }

    let mut samples: Vec<ImuSample> = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let offset = e.position().map_or(0, |p| p.byte());
            parse_error(file, offset, e.to_string())
        })?;
        let pos = row.position().expect("records carry positions");
        let mut v = [0.0; 7];
        for (k, &c) in columns.iter().enumerate() {
            let field = row.get(c).ok_or_else(|| {
                parse_error(
                    file,
                    pos.byte(),
                    format!("line {} lacks column {}", pos.line(), IMU_HEADER[k]),
                )
            })?;
            v[k] = field.parse().map_err(|_| {
                parse_error(
                    file,
                    pos.byte(),
                    format!("line {}: {:?} is not a number", pos.line(), field),
                )
            })?;
        }
        let sample = ImuSample::new(v[0], Vector3::new(v[1], v[2], v[3]), Vector3::new(v[4], v[5], v[6]));
        if let Some(last) = samples.last() {
            if sample.stamp <= last.stamp {
                return Err(Error::OutOfOrder(format!(
                    "{} line {}: stamp {} does not follow {}",
                    file.display(),
                    pos.line(),
                    sample.stamp,
                    last.stamp
                )));
            }
        }
        samples.push(sample);
    }
    Ok(samples)
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>> {
    parse_imu_csv(path, &fs::read_to_string(path)?)
}

pub fn write_imu_csv(samples: &[ImuSample], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", IMU_HEADER.join(","))?;
    for s in samples {
        // Shortest round-trip representation.
        writeln!(
            w,
            "{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            s.stamp, s.accel.x, s.accel.y, s.accel.z, s.gyro.x, s.gyro.y, s.gyro.z
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Formats `v` with nine significant digits, dropping trailing zeros.
pub fn format_significant(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let exponent = v.abs().log10().floor() as i32;
    let trimmed = |s: String| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-5..9).contains(&exponent) {
        let decimals = (8 - exponent).max(0) as usize;
        trimmed(format!("{v:.decimals$}"))
    } else {
        let s = format!("{v:.8e}");
        let (mantissa, exp) = s.split_once('e').unwrap();
        format!("{}e{exp}", trimmed(mantissa.to_string()))
    }
}

pub fn format_record(r: &TrajectoryRecord) -> String {
    let t = r.pose.trans;
    let q = r.pose.rot.quaternion();
    let mut line = format!("{:.8}", r.stamp);
    for v in [t.x, t.y, t.z, q.i, q.j, q.k, q.w] {
        line.push(' ');
        line.push_str(&format_significant(v));
    }
    line
}

/// Parses a trajectory: one `stamp x y z qx qy qz qw` line per record.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_trajectory(file: &Path, text: &str) -> Result<Vec<TrajectoryRecord>> {
    let mut out: Vec<TrajectoryRecord> = Vec::new();
    let mut offset = 0u64;
    for (n, line) in text.split_inclusive('\n').enumerate() {
        let start = offset;
        offset += line.len() as u64;
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let values: Vec<f64> = body
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_error(file, start, format!("line {}: {e}", n + 1)))?;
        if values.len() != 8 {
            return Err(parse_error(
                file,
                start,
                format!("line {}: expected 8 values, found {}", n + 1, values.len()),
            ));
        }
        let q = Quaternion::new(values[7], values[4], values[5], values[6]);
        if q.norm() < 1e-6 {
            return Err(parse_error(file, start, format!("line {}: zero quaternion", n + 1)));
        }
        let record = TrajectoryRecord {
            stamp: values[0],
            pose: Se3Pose::new(
                UnitQuaternion::from_quaternion(q),
                Vector3::new(values[1], values[2], values[3]),
            ),
        };
        if let Some(last) = out.last() {
            if record.stamp <= last.stamp {
                return Err(Error::OutOfOrder(format!(
                    "{} line {}: stamp {} does not follow {}",
                    file.display(),
                    n + 1,
                    record.stamp,
                    last.stamp
                )));
            }
        }
        out.push(record);
    }
    Ok(out)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    parse_trajectory(path, &fs::read_to_string(path)?)
}

pub fn write_trajectory(records: &[TrajectoryRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        writeln!(w, "{}", format_record(r))?;
    }
    w.flush()?;
    Ok(())
}
