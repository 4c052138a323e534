//! Analytic sensor motion: a planar path traversed with a smooth speed
//! profile, heading along the path tangent, optional roll/pitch wobble.

use std::f64::consts::{PI, TAU};

use nalgebra::{Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::Se3Pose;

#[derive(Clone, Debug)]
enum Segment {
    Line {
        start: Vector2<f64>,
        heading: f64,
        length: f64,
    },
    /// Counter-clockwise (`turn = 1`) or clockwise (`turn = -1`) arc.
    Arc {
        center: Vector2<f64>,
        radius: f64,
        start_angle: f64,
        sweep: f64,
        turn: f64,
    },
}

impl Segment {
    fn length(&self) -> f64 {
        match self {
            Segment::Line { length, .. } => *length,
            Segment::Arc { radius, sweep, .. } => radius * sweep,
        }
    }

    /// Position, unit tangent and signed curvature at arc length `s`.
    fn eval(&self, s: f64) -> (Vector2<f64>, Vector2<f64>, f64) {
        match self {
            Segment::Line { start, heading, .. } => {
                let t = Vector2::new(heading.cos(), heading.sin());
                (start + t * s, t, 0.0)
            }
            Segment::Arc {
                center,
                radius,
                start_angle,
                turn,
                ..
            } => {
                let a = start_angle + turn * s / radius;
                let radial = Vector2::new(a.cos(), a.sin());
                let tangent = Vector2::new(-a.sin(), a.cos()) * *turn;
                (center + radial * *radius, tangent, turn / radius)
            }
        }
    }
}

/// A planar path parameterized by arc length.
#[derive(Clone, Debug)]
pub struct Path {
    segments: Vec<Segment>,
    cumulative: Vec<f64>,
    closed: bool,
}

impl Path {
    fn new(segments: Vec<Segment>, closed: bool) -> Self {
        let mut cumulative = Vec::with_capacity(segments.len() + 1);
        let mut acc = 0.0;
        cumulative.push(0.0);
        for s in &segments {
            acc += s.length();
            cumulative.push(acc);
        }
        Self {
            segments,
            cumulative,
            closed,
        }
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }

    pub fn point(start: Vector2<f64>, heading: f64) -> Self {
        Self::new(
            vec![Segment::Line {
                start,
                heading,
                length: 0.0,
            }],
            false,
        )
    }

    pub fn line(start: Vector2<f64>, heading: f64, length: f64) -> Self {
        Self::new(vec![Segment::Line { start, heading, length }], false)
    }

    /// Counter-clockwise circle starting at its lowest point, heading +x.
    pub fn circle(center: Vector2<f64>, radius: f64) -> Self {
        Self::new(
            vec![Segment::Arc {
                center,
                radius,
                start_angle: -PI / 2.0,
                sweep: TAU,
                turn: 1.0,
            }],
            true,
        )
    }

    /// Counter-clockwise square with rounded corners, starting mid-way along
    /// the bottom edge heading +x.
    pub fn rounded_square(center: Vector2<f64>, side: f64, corner_radius: f64) -> Self {
        let h = side / 2.0;
        let straight = side - 2.0 * corner_radius;
        let mut segs = Vec::new();
        let corners = [
            Vector2::new(h - corner_radius, -h + corner_radius),
            Vector2::new(h - corner_radius, h - corner_radius),
            Vector2::new(-h + corner_radius, h - corner_radius),
            Vector2::new(-h + corner_radius, -h + corner_radius),
        ];
        // First half edge, then (corner, full edge) three times, corner, last half edge.
        segs.push(Segment::Line {
            start: center + Vector2::new(0.0, -h),
            heading: 0.0,
            length: straight / 2.0,
        });
        for (k, c) in corners.iter().enumerate() {
            let start_angle = -PI / 2.0 + k as f64 * PI / 2.0;
            segs.push(Segment::Arc {
                center: center + c,
                radius: corner_radius,
                start_angle,
                sweep: PI / 2.0,
                turn: 1.0,
            });
            let heading = (k as f64 + 1.0) * PI / 2.0;
            let (p, _, _) = segs.last().unwrap().eval(PI / 2.0 * corner_radius);
            let length = if k == 3 { straight / 2.0 } else { straight };
            segs.push(Segment::Line {
                start: p,
                heading,
                length,
            });
        }
        Self::new(segs, true)
    }

    /// Position, unit tangent, signed curvature at arc length `s`.
    pub fn eval(&self, s: f64) -> (Vector2<f64>, Vector2<f64>, f64) {
        let total = self.length();
        let s = if self.closed && total > 0.0 {
            s.rem_euclid(total)
        } else {
            s.clamp(0.0, total)
        };
        let idx = self
            .cumulative
            .partition_point(|&c| c <= s)
            .clamp(1, self.segments.len())
            - 1;
        self.segments[idx].eval(s - self.cumulative[idx])
    }
}

/// Rest, smooth acceleration to cruise speed, cruise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedProfile {
    pub rest: f64,
    pub ramp: f64,
    pub speed: f64,
}

impl SpeedProfile {
    /// Arc length, speed and tangential acceleration at time `t`.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        let tau = t - self.rest;
        if tau <= 0.0 || self.speed == 0.0 {
            return (0.0, 0.0, 0.0);
        }
        if tau >= self.ramp {
            let s_ramp = self.speed * self.ramp * 0.5;
            return (s_ramp + self.speed * (tau - self.ramp), self.speed, 0.0);
        }
        // Acceleration (V/T)(1 − cos 2πu) starts and ends at zero.
        let u = tau / self.ramp;
        let s = self.speed * self.ramp * (u * u / 2.0 + ((TAU * u).cos() - 1.0) / (4.0 * PI * PI));
        let v = self.speed * (u - (TAU * u).sin() / TAU);
        let a = self.speed / self.ramp * (1.0 - (TAU * u).cos());
        (s, v, a)
    }
}

/// Small sinusoidal roll/pitch motion superimposed on the heading.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Wobble {
    pub amplitude: f64,
    pub frequency: f64,
}

/// Instantaneous kinematics of the sensor.
#[derive(Clone, Copy, Debug)]
pub struct Kinematics {
    pub pose: Se3Pose,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    /// Angular rate in the body frame.
    pub omega_body: Vector3<f64>,
}

/// Path + speed profile + constant height.
#[derive(Clone, Debug)]
pub struct Motion {
    pub path: Path,
    pub profile: SpeedProfile,
    pub height: f64,
    pub wobble: Wobble,
}

impl Motion {
    pub fn at(&self, t: f64) -> Kinematics {
        let (s, sd, sdd) = self.profile.eval(t);
        let (p, tan, kappa) = self.path.eval(s);
        let normal = Vector2::new(-tan.y, tan.x);
        let vel = tan * sd;
        let acc = tan * sdd + normal * (kappa * sd * sd);
        let yaw = tan.y.atan2(tan.x);
        let yaw_rate = kappa * sd;

        let (roll, pitch, roll_rate, pitch_rate) = if self.wobble.amplitude > 0.0 {
            let w = TAU * self.wobble.frequency;
            let a = self.wobble.amplitude;
            (
                a * (w * t).sin(),
                a * (0.7 * w * t).cos(),
                a * w * (w * t).cos(),
                -a * 0.7 * w * (0.7 * w * t).sin(),
            )
        } else {
            (0.0, 0.0, 0.0, 0.0)
        };
        let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_euler_angles(roll, pitch, yaw));
        // Body rates of R = Rz(yaw) Ry(pitch) Rx(roll).
        let omega_body = Vector3::new(
            roll_rate - yaw_rate * pitch.sin(),
            pitch_rate * roll.cos() + yaw_rate * pitch.cos() * roll.sin(),
            -pitch_rate * roll.sin() + yaw_rate * pitch.cos() * roll.cos(),
        );
        Kinematics {
            pose: Se3Pose::new(rot, Vector3::new(p.x, p.y, self.height)),
            velocity: Vector3::new(vel.x, vel.y, 0.0),
            acceleration: Vector3::new(acc.x, acc.y, 0.0),
            omega_body,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3;

    fn fd_check(m: &Motion, t: f64) {
        let h = 1e-5;
        let k = m.at(t);
        let kp = m.at(t + h);
        let km = m.at(t - h);
        let v_fd = (kp.pose.trans - km.pose.trans) / (2.0 * h);
        let a_fd = (kp.velocity - km.velocity) / (2.0 * h);
        let w_fd = so3::log(&(km.pose.rot.inverse() * kp.pose.rot)) / (2.0 * h);
        assert!((v_fd - k.velocity).norm() < 1e-6, "velocity at {t}");
        assert!((a_fd - k.acceleration).norm() < 1e-4, "acceleration at {t}");
        assert!(
            (w_fd - k.omega_body).norm() < 1e-6,
            "rate at {t}: {w_fd} vs {}",
            k.omega_body
        );
    }

    #[test]
    fn derivatives_are_consistent() {
        let m = Motion {
            path: Path::rounded_square(Vector2::new(1.0, -2.0), 10.0, 1.5),
            profile: SpeedProfile {
                rest: 1.0,
                ramp: 1.0,
                speed: 2.0,
            },
            height: 1.0,
            wobble: Wobble {
                amplitude: 0.05,
                frequency: 0.3,
            },
        };
        for &t in &[0.5, 1.3, 1.7, 2.5, 4.1, 5.7, 9.9, 14.2, 19.0] {
            fd_check(&m, t);
        }
    }

    #[test]
    fn rounded_square_is_closed_and_continuous() {
        let p = Path::rounded_square(Vector2::zeros(), 10.0, 1.0);
        let expected = 4.0 * 8.0 + TAU;
        assert!((p.length() - expected).abs() < 1e-12);
        let (a, ta, _) = p.eval(0.0);
        let (b, tb, _) = p.eval(p.length() - 1e-9);
        assert!((a - b).norm() < 1e-8 && (ta - tb).norm() < 1e-8);
        let mut s = 0.0;
        while s < p.length() {
            let (x, _, _) = p.eval(s);
            let (y, _, _) = p.eval(s + 1e-4);
            assert!((x - y).norm() < 1.01e-4);
            s += 0.01;
        }
    }

    #[test]
    fn circle_has_centripetal_acceleration() {
        let m = Motion {
            path: Path::circle(Vector2::zeros(), 4.0),
            profile: SpeedProfile {
                rest: 0.0,
                ramp: 0.5,
                speed: 2.0,
            },
            height: 0.0,
            wobble: Wobble::default(),
        };
        let k = m.at(3.0);
        assert!((k.acceleration.norm() - 1.0).abs() < 1e-12);
        assert!((k.omega_body.z - 0.5).abs() < 1e-12);
    }

    #[test]
    fn speed_profile_is_smooth() {
        let p = SpeedProfile {
            rest: 1.0,
            ramp: 2.0,
            speed: 3.0,
        };
        let (s_end, v_end, a_end) = p.eval(3.0);
        assert!((s_end - 3.0).abs() < 1e-12);
        assert!((v_end - 3.0).abs() < 1e-12);
        assert!(a_end.abs() < 1e-12);
        let (s, v, a) = p.eval(1.0);
        assert_eq!((s, v, a), (0.0, 0.0, 0.0));
    }
}
