//! Per-scan binary point files.
//!
//! Each file starts with one ASCII line naming the field order, a
//! permutation of `x y z t`. Records follow back to back in that order:
//! coordinates as little-endian `f32`, the stamp as little-endian `f64`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::preprocess::{RawScan, TimedPoint};

/// Field order written by [`write_scan`].
pub const DEFAULT_HEADER: &str = "x y z t";

/// Extension of scan files inside a sequence directory.
pub const SCAN_EXTENSION: &str = "bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Field {
    X,
    Y,
    Z,
    T,
}

impl Field {
    fn width(self) -> usize {
        match self {
            Field::T => 8,
            _ => 4,
        }
    }
}

fn parse_error(file: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::ParseError {
        file: file.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn parse_header(file: &Path, line: &[u8]) -> Result<[Field; 4]> {
    let text = std::str::from_utf8(line).map_err(|_| parse_error(file, 0, "header is not ASCII"))?;
    let mut fields = Vec::with_capacity(4);
    let mut offset = 0;
    for token in text.split(' ') {
        let f = match token {
            "x" => Field::X,
            "y" => Field::Y,
            "z" => Field::Z,
            "t" => Field::T,
            other => return Err(parse_error(file, offset, format!("unknown field {other:?}"))),
        };
        if fields.contains(&f) {
            return Err(parse_error(file, offset, format!("duplicate field {token:?}")));
        }
        fields.push(f);
        offset += token.len() + 1;
    }
    fields
        .try_into()
        .map_err(|v: Vec<Field>| parse_error(file, 0, format!("header names {} fields, expected 4", v.len())))
}

/// Decodes one scan file. Start and end stamps are the extreme point stamps.
pub fn parse_scan(file: &Path, bytes: &[u8]) -> Result<RawScan> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| parse_error(file, bytes.len(), "missing header line"))?;
    let fields = parse_header(file, &bytes[..newline])?;
    let record: usize = fields.iter().map(|f| f.width()).sum();

    let body = &bytes[newline + 1..];
    let whole = body.len() / record * record;
    if whole != body.len() {
        return Err(parse_error(
            file,
            newline + 1 + whole,
            format!("truncated record ({} of {record} bytes)", body.len() - whole),
        ));
    }

    let mut points = Vec::with_capacity(body.len() / record);
    for chunk in body.chunks_exact(record) {
        let mut pos = Vector3::zeros();
        let mut stamp = 0.0;
        let mut at = 0;
        for f in fields {
            let w = f.width();
            let raw = &chunk[at..at + w];
            match f {
                Field::T => stamp = f64::from_le_bytes(raw.try_into().unwrap()),
                axis => {
                    let v = f32::from_le_bytes(raw.try_into().unwrap()) as f64;
                    pos[axis as usize] = v;
                }
            }
            at += w;
        }
        points.push(TimedPoint::new(pos, stamp));
    }
    Ok(RawScan::from_points(points))
}

pub fn read_scan(path: &Path) -> Result<RawScan> {
    let bytes = fs::read(path)?;
    parse_scan(path, &bytes)
}

/// Encodes a scan with the default field order.
pub fn encode_scan(scan: &RawScan) -> Vec<u8> {
    let mut out = Vec::with_capacity(DEFAULT_HEADER.len() + 1 + scan.len() * 20);
    out.extend_from_slice(DEFAULT_HEADER.as_bytes());
    out.push(b'\n');
    for p in &scan.points {
        for v in p.pos.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.extend_from_slice(&p.stamp.to_le_bytes());
    }
    out
}

pub fn write_scan(scan: &RawScan, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&encode_scan(scan))?;
    w.flush()?;
    Ok(())
}

/// Scan files of a sequence directory in filename order.
pub fn list_scan_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == SCAN_EXTENSION) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Lazily reads a scan sequence, checking that scans advance in time.
pub struct ScanSequence {
    files: std::vec::IntoIter<PathBuf>,
    last_start: f64,
}

impl ScanSequence {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Self {
            files: list_scan_files(dir)?.into_iter(),
            last_start: f64::NEG_INFINITY,
        })
    }

    pub fn remaining(&self) -> usize {
        self.files.len()
    }
}

impl Iterator for ScanSequence {
    type Item = Result<RawScan>;

    fn next(&mut self) -> Option<Self::Item> {
        let path = self.files.next()?;
        let scan = match read_scan(&path) {
            Ok(s) => s,
            Err(e) => return Some(Err(e)),
        };
        if scan.is_empty() {
            return Some(Err(parse_error(&path, 0, "scan has no points")));
        }
        if scan.scan_start <= self.last_start {
            return Some(Err(Error::OutOfOrder(format!(
                "{} starts at {} after a scan starting at {}",
                path.display(),
                scan.scan_start,
                self.last_start
            ))));
        }
        self.last_start = scan.scan_start;
        Some(Ok(scan))
    }
}

/// Writes `scan_000000.bin`, `scan_000001.bin`, ... into `dir`.
pub fn write_scan_sequence(scans: &[RawScan], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, scan) in scans.iter().enumerate() {
        write_scan(scan, &dir.join(format!("scan_{i:06}.{SCAN_EXTENSION}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RawScan {
        RawScan::from_points(vec![
            TimedPoint::new(Vector3::new(1.5, -2.25, 0.125), 10.0),
            TimedPoint::new(Vector3::new(0.1, 0.2, 0.3), 10.05),
            TimedPoint::new(Vector3::new(-7.0, 3.0, 1e-3), 10.1),
        ])
    }

    #[test]
    fn round_trip_is_exact_for_f32_coordinates() {
        let scan = sample();
        let back = parse_scan(Path::new("mem"), &encode_scan(&scan)).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in scan.points.iter().zip(&back.points) {
            assert_eq!(a.stamp, b.stamp);
            for k in 0..3 {
                assert_eq!(a.pos[k] as f32, b.pos[k] as f32);
            }
        }
        assert_eq!(back.scan_start, 10.0);
        assert_eq!(back.scan_end, 10.1);
    }

    #[test]
    fn permuted_header_is_honored() {
        let mut bytes = b"t z y x\n".to_vec();
        bytes.extend_from_slice(&2.5f64.to_le_bytes());
        for v in [3.0f32, 2.0, 1.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let scan = parse_scan(Path::new("mem"), &bytes).unwrap();
        assert_eq!(scan.points[0].pos, Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(scan.points[0].stamp, 2.5);
    }

    #[test]
    fn truncated_record_reports_its_offset() {
        let mut bytes = encode_scan(&sample());
        bytes.truncate(bytes.len() - 5);
        // Header 8 bytes, two whole 20-byte records, then the partial one.
        match parse_scan(Path::new("mem"), &bytes) {
            Err(Error::ParseError { offset, .. }) => assert_eq!(offset, 8 + 40),
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn malformed_headers_are_rejected() {
        for header in ["x y z\n", "x y z w\n", "x x z t\n", "no newline"] {
            assert!(matches!(
                parse_scan(Path::new("mem"), header.as_bytes()),
                Err(Error::ParseError { .. })
            ));
        }
        match parse_scan(Path::new("mem"), b"x y q t\n") {
            Err(Error::ParseError { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected ParseError, got {other:?}"),
        }
    }
}
