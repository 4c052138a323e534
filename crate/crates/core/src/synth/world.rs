//! Axis-aligned box worlds and exact ray casting against them.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn centered(center: [f64; 3], size: [f64; 3]) -> Self {
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for k in 0..3 {
            min[k] = center[k] - size[k] / 2.0;
            max[k] = center[k] + size[k] / 2.0;
        }
        Self { min, max }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] > self.min[k] && p[k] < self.max[k])
    }

    /// Distance along the ray to the box surface when the origin is inside.
    fn exit_distance(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        for k in 0..3 {
            if dir[k] > 0.0 {
                best = best.min((self.max[k] - origin[k]) / dir[k]);
            } else if dir[k] < 0.0 {
                best = best.min((self.min[k] - origin[k]) / dir[k]);
            }
        }
        best
    }

    /// Slab-method entry distance for an origin outside the box.
    fn entry_distance(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for k in 0..3 {
            if dir[k] == 0.0 {
                if origin[k] <= self.min[k] || origin[k] >= self.max[k] {
                    return None;
                }
                continue;
            }
            let a = (self.min[k] - origin[k]) / dir[k];
            let b = (self.max[k] - origin[k]) / dir[k];
            t_near = t_near.max(a.min(b));
            t_far = t_far.min(a.max(b));
        }
        (t_near <= t_far && t_near > 0.0).then_some(t_near)
    }
}

/// The inside of `outer` minus the solid `obstacles`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub outer: Aabb,
    #[serde(default)]
    pub obstacles: Vec<Aabb>,
}

impl World {
    /// Whether `p` lies in free space.
    pub fn is_free(&self, p: &Vector3<f64>) -> bool {
        self.outer.contains(p) && !self.obstacles.iter().any(|o| o.contains(p) || on_surface(o, p))
    }

    /// Range to the first surface hit along the unit direction `dir`.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> f64 {
        self.obstacles
            .iter()
            .filter_map(|o| o.entry_distance(origin, dir))
            .fold(self.outer.exit_distance(origin, dir), f64::min)
    }

    /// Rectangular room with a few boxes along the walls.
    pub fn box_room(size: [f64; 3]) -> Self {
        let [sx, sy, sz] = size;
        let outer = Aabb::centered([0.0, 0.0, sz / 2.0], size);
        let obstacles = vec![
            Aabb::new([sx / 2.0 - 1.2, -sy / 2.0, 0.0], [sx / 2.0, -sy / 2.0 + 0.8, 1.1]),
            Aabb::new([-sx / 2.0, sy / 2.0 - 1.5, 0.0], [-sx / 2.0 + 0.6, sy / 2.0, 1.8]),
            Aabb::new([-1.0, sy / 2.0 - 0.4, 0.0], [0.2, sy / 2.0, 0.9]),
            Aabb::new([sx / 2.0 - 0.5, 0.5, 0.0], [sx / 2.0, 1.3, sz]),
        ];
        Self { outer, obstacles }
    }

    /// Closed corridor of the given `width` around a square of side `side`
    /// centered at the origin, with shelves and pillars along the walls.
    pub fn ring_corridor(side: f64, width: f64, height: f64) -> Self {
        let h = side / 2.0;
        let outer = Aabb::centered([0.0, 0.0, height / 2.0], [side + width, side + width, height]);
        let inner_half = h - width / 2.0;
        let mut obstacles = vec![Aabb::new(
            [-inner_half, -inner_half, 0.0],
            [inner_half, inner_half, height],
        )];
        // Irregular structure along each outer wall so straight stretches are
        // constrained along the corridor.
        let wall = h + width / 2.0;
        let offsets = [-0.6, 0.35, -0.15, 0.7];
        for (k, &o) in offsets.iter().enumerate() {
            let along = o * inner_half;
            let depth = 0.3 + 0.1 * k as f64;
            let len = 0.6 + 0.2 * k as f64;
            let top = 1.2 + 0.4 * k as f64;
            obstacles.push(Aabb::new(
                [along - len / 2.0, -wall, 0.0],
                [along + len / 2.0, -wall + depth, top],
            ));
            obstacles.push(Aabb::new(
                [wall - depth, -along - len / 2.0, 0.0],
                [wall, -along + len / 2.0, top],
            ));
            obstacles.push(Aabb::new(
                [-along - len / 2.0, wall - depth, 0.0],
                [-along + len / 2.0, wall, top],
            ));
            obstacles.push(Aabb::new(
                [-wall, along - len / 2.0, 0.0],
                [-wall + depth, along + len / 2.0, top],
            ));
        }
        Self { outer, obstacles }
    }

    /// Long featureless corridor along +x starting at x = 0.
    pub fn corridor(length: f64, width: f64, height: f64) -> Self {
        Self {
            outer: Aabb::new([0.0, -width / 2.0, 0.0], [length, width / 2.0, height]),
            obstacles: Vec::new(),
        }
    }
}

fn on_surface(o: &Aabb, p: &Vector3<f64>) -> bool {
    (0..3).all(|k| p[k] >= o.min[k] && p[k] <= o.max[k])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ray_hits_nearest_wall() {
        let w = World {
            outer: Aabb::new([-5.0, -5.0, -5.0], [5.0, 5.0, 5.0]),
            obstacles: vec![Aabb::new([2.0, -1.0, -1.0], [3.0, 1.0, 1.0])],
        };
        let o = Vector3::zeros();
        assert!((w.cast(&o, &Vector3::x()) - 2.0).abs() < 1e-12);
        assert!((w.cast(&o, &-Vector3::x()) - 5.0).abs() < 1e-12);
        let d = Vector3::new(1.0, 1.0, 0.0).normalize();
        assert!((w.cast(&o, &d) - 5.0 * 2f64.sqrt()).abs() < 1e-12);
        // Grazing the obstacle from above misses it.
        let d = Vector3::new(2.0, 0.0, 1.2).normalize();
        assert!(w.cast(&o, &d) > 2.5);
    }

    #[test]
    fn obstacles_are_not_free_space() {
        let w = World::ring_corridor(10.0, 3.0, 3.0);
        assert!(!w.is_free(&Vector3::new(0.0, 0.0, 1.0)));
        assert!(w.is_free(&Vector3::new(0.0, -5.0, 1.0)));
        assert!(!w.is_free(&Vector3::new(0.0, -7.0, 1.0)));
    }
}
