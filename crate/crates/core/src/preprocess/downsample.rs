use std::collections::HashMap;

use nalgebra::Vector3;

use super::{RawScan, TimedPoint};
use crate::registration::voxel_key;

#[derive(Default)]
struct Cell {
    sum: Vector3<f64>,
    stamp_sum: f64,
    count: usize,
}

impl Cell {
    fn mean_stamp(&self) -> f64 {
        self.stamp_sum / self.count as f64
    }

    fn add(&mut self, p: &TimedPoint) {
        self.sum += p.pos;
        self.stamp_sum += p.stamp;
        self.count += 1;
    }
}

/// Voxel-grid downsampling that averages positions and timestamps.
///
/// A point whose stamp is more than a tenth of the scan duration away from
/// its cell's running mean stamp goes to a second cell under the same key, so
/// the start and end of a sweep are never fused. Output cells keep creation
/// order.
pub fn voxel_downsample(scan: &RawScan, resolution: f64) -> RawScan {
    assert!(resolution > 0.0, "resolution must be positive");
    let split = scan.duration() / 10.0;
    let mut cells: Vec<Cell> = Vec::new();
    // key -> (first cell, overflow cell)
    let mut index: HashMap<[i64; 3], (usize, Option<usize>)> = HashMap::new();

    for p in &scan.points {
        let key = voxel_key(&p.pos, resolution);
        match index.get_mut(&key) {
            None => {
                index.insert(key, (cells.len(), None));
                let mut c = Cell::default();
                c.add(p);
                cells.push(c);
            }
            Some((first, overflow)) => {
                if (p.stamp - cells[*first].mean_stamp()).abs() <= split {
                    cells[*first].add(p);
                } else if let Some(o) = overflow {
                    cells[*o].add(p);
                } else {
                    *overflow = Some(cells.len());
                    let mut c = Cell::default();
                    c.add(p);
                    cells.push(c);
                }
            }
        }
    }

    let points = cells
        .iter()
        .map(|c| TimedPoint::new(c.sum / c.count as f64, c.mean_stamp()))
        .collect();
    RawScan::new(points, scan.scan_start, scan.scan_end)
}
