use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector3, Vector6};

use super::so3::{self, Rotation};

/// Rigid transform `[R | t]`.
///
/// Tangent perturbations are 6-vectors `ξ = [φ, ρ]` applied on the right,
/// `T ⊞ ξ = T · [exp(φ) | ρ]`, so `R ← R·exp(φ)` and `t ← t + R·ρ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Se3Pose {
    pub rot: Rotation,
    pub trans: Vector3<f64>,
}

impl Default for Se3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se3Pose {
    pub fn new(rot: Rotation, trans: Vector3<f64>) -> Self {
        Self { rot, trans }
    }

    pub fn identity() -> Self {
        Self {
            rot: Rotation::identity(),
            trans: Vector3::zeros(),
        }
    }

    pub fn from_translation(trans: Vector3<f64>) -> Self {
        Self {
            rot: Rotation::identity(),
            trans,
        }
    }

    /// Pose from an axis-angle rotation and a translation.
    pub fn from_parts(omega: Vector3<f64>, trans: Vector3<f64>) -> Self {
        Self {
            rot: so3::exp(&omega),
            trans,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rot.to_rotation_matrix().into_inner()
    }

    pub fn compose(&self, other: &Se3Pose) -> Se3Pose {
        let mut rot = self.rot * other.rot;
        rot.renormalize();
        Se3Pose {
            rot,
            trans: self.trans + self.rot * other.trans,
        }
    }

    pub fn inverse(&self) -> Se3Pose {
        let rot = self.rot.inverse();
        Se3Pose {
            rot,
            trans: -(rot * self.trans),
        }
    }

    /// `self⁻¹ · other` without forming the inverse explicitly.
    pub fn between(&self, other: &Se3Pose) -> Se3Pose {
        let inv = self.rot.inverse();
        let mut rot = inv * other.rot;
        rot.renormalize();
        Se3Pose {
            rot,
            trans: inv * (other.trans - self.trans),
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot * p + self.trans
    }

    /// Right-multiplicative retraction.
    pub fn retract(&self, xi: &Vector6<f64>) -> Se3Pose {
        let phi = xi.fixed_rows::<3>(0).into_owned();
        let rho = xi.fixed_rows::<3>(3).into_owned();
        let mut rot = self.rot * so3::exp(&phi);
        rot.renormalize();
        Se3Pose {
            rot,
            trans: self.trans + self.rot * rho,
        }
    }

    /// Inverse of [`retract`](Self::retract): `self.retract(&self.local(other)) == other`.
    pub fn local(&self, other: &Se3Pose) -> Vector6<f64> {
        let d = self.between(other);
        let mut xi = Vector6::zeros();
        xi.fixed_rows_mut::<3>(0).copy_from(&so3::log(&d.rot));
        xi.fixed_rows_mut::<3>(3).copy_from(&d.trans);
        xi
    }

    /// Chart coordinates of this pose relative to the identity.
    pub fn log(&self) -> Vector6<f64> {
        Se3Pose::identity().local(self)
    }

    /// Spherical interpolation of the rotation along the shortest arc and
    /// linear interpolation of the translation.
    pub fn interpolate(&self, other: &Se3Pose, alpha: f64) -> Se3Pose {
        if alpha <= 0.0 {
            return *self;
        }
        if alpha >= 1.0 {
            return *other;
        }
        let delta = so3::log(&(self.rot.inverse() * other.rot));
        let mut rot = self.rot * so3::exp(&(delta * alpha));
        rot.renormalize();
        Se3Pose {
            rot,
            trans: self.trans + (other.trans - self.trans) * alpha,
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.trans);
        m
    }

    /// Rotation angle (rad) and translation norm (m) of `self⁻¹·other`.
    pub fn distance(&self, other: &Se3Pose) -> (f64, f64) {
        let d = self.between(other);
        (d.rot.angle(), d.trans.norm())
    }

    pub fn from_quaternion_xyzw(t: Vector3<f64>, q: [f64; 4]) -> Se3Pose {
        let rot = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]));
        Se3Pose { rot, trans: t }
    }
}

impl Mul for Se3Pose {
    type Output = Se3Pose;
    fn mul(self, rhs: Se3Pose) -> Se3Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Se3Pose> for &Se3Pose {
    type Output = Se3Pose;
    fn mul(self, rhs: &Se3Pose) -> Se3Pose {
        self.compose(rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_pose(rng: &mut impl Rng) -> Se3Pose {
        let w = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        let t = Vector3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        Se3Pose::from_parts(w, t)
    }

    fn assert_pose_eq(a: &Se3Pose, b: &Se3Pose, tol: f64) {
        let (r, t) = a.distance(b);
        assert!(r < tol && t < tol, "rot {r} trans {t}");
    }

    #[test]
    fn identity_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_pose(&mut rng);
        assert_pose_eq(&Se3Pose::identity().compose(&x), &x, 1e-15);
        assert_pose_eq(&x.inverse().inverse(), &x, 1e-9);
    }

    #[test]
    fn apply_hand_example() {
        let t = Se3Pose::from_parts(Vector3::new(0.0, 0.0, FRAC_PI_2), Vector3::new(1.0, 0.0, 0.0));
        let p = t.apply(&Vector3::new(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(p, Vector3::new(1.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn group_axioms_on_random_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = random_pose(&mut rng);
            assert_pose_eq(&((a * b) * c), &(a * (b * c)), 1e-9);
            assert_pose_eq(&(a * b).inverse(), &(b.inverse() * a.inverse()), 1e-9);
            let p = Vector3::new(0.3, -1.0, 2.0);
            assert_abs_diff_eq!((a * b).apply(&p), a.apply(&b.apply(&p)), epsilon = 1e-9);
            assert_pose_eq(&a.between(&b), &(a.inverse() * b), 1e-12);
        }
    }

    #[test]
    fn retract_local_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let xi = a.local(&b);
            assert_pose_eq(&a.retract(&xi), &b, 1e-9);
        }
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_pose(&mut rng);
        let b = random_pose(&mut rng);
        assert_eq!(a.interpolate(&b, 0.0), a);
        assert_eq!(a.interpolate(&b, 1.0), b);

        let b = Se3Pose::from_parts(Vector3::new(0.0, 0.0, PI), Vector3::new(2.0, 0.0, 0.0));
        let m = Se3Pose::identity().interpolate(&b, 0.5);
        let expect = Se3Pose::from_parts(Vector3::new(0.0, 0.0, FRAC_PI_2), Vector3::new(1.0, 0.0, 0.0));
        assert_pose_eq(&m, &expect, 1e-12);
    }

    #[test]
    fn composition_drift_stays_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let steps: Vec<Se3Pose> = (0..64).map(|_| random_pose(&mut rng)).collect();
        let mut acc = Se3Pose::identity();
        for i in 0..1_000_000 {
            acc = acc.compose(&steps[i % steps.len()]);
        }
        assert!(so3::orthonormality_error(&acc.rot) < 1e-6);
    }
}
