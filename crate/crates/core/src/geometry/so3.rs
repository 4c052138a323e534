//! Rotation group helpers on unit quaternions.
//!
//! Tangent vectors are axis-angle 3-vectors. Perturbations are applied on the
//! right: `R ⊞ φ = R · exp(φ)`.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

/// Rotation storage used throughout the crate.
pub type Rotation = UnitQuaternion<f64>;

/// Below this angle the exp/log maps switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Skew-symmetric matrix such that `hat(a) * b == a.cross(&b)`.
#[inline]
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map (Rodrigues on the quaternion half-angle).
pub fn exp(omega: &Vector3<f64>) -> Rotation {
    let theta_sq = omega.norm_squared();
    let theta = theta_sq.sqrt();
    if theta < SMALL_ANGLE {
        let q = Quaternion::new(1.0 - theta_sq / 8.0, 0.5 * omega.x, 0.5 * omega.y, 0.5 * omega.z);
        UnitQuaternion::from_quaternion(q)
    } else {
        let half = 0.5 * theta;
        let s = half.sin() / theta;
        UnitQuaternion::from_quaternion(Quaternion::new(half.cos(), s * omega.x, s * omega.y, s * omega.z))
    }
}

/// Logarithm map. The returned angle lies in `[0, π]`.
///
/// Works on the quaternion with non-negative scalar part and recovers the
/// angle with `atan2`, which stays well conditioned at both ends of the range.
pub fn log(r: &Rotation) -> Vector3<f64> {
    let q = r.quaternion();
    let (w, v) = if q.w < 0.0 { (-q.w, -q.imag()) } else { (q.w, q.imag()) };
    let n = v.norm();
    if n < SMALL_ANGLE {
        // θ ≈ 2n, so 2·atan2(n, w)/n ≈ 2/w·(1 − n²/(3w²))
        let scale = 2.0 / w * (1.0 - n * n / (3.0 * w * w));
        return v * scale;
    }
    let theta = 2.0 * n.atan2(w);
    v * (theta / n)
}

/// Right Jacobian of the exponential map.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = phi.norm_squared();
    let k = hat(phi);
    if theta_sq < 1e-10 {
        return Matrix3::identity() - 0.5 * k + k * k / 6.0;
    }
    let theta = theta_sq.sqrt();
    Matrix3::identity() - (1.0 - theta.cos()) / theta_sq * k + (theta - theta.sin()) / (theta_sq * theta) * k * k
}

/// Inverse of [`right_jacobian`].
pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = phi.norm_squared();
    let k = hat(phi);
    if theta_sq < 1e-10 {
        return Matrix3::identity() + 0.5 * k + k * k / 12.0;
    }
    let theta = theta_sq.sqrt();
    let coeff = 1.0 / theta_sq - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + coeff * k * k
}

/// Largest deviation of `R·Rᵀ` from identity, plus `|det R − 1|`.
pub fn orthonormality_error(r: &Rotation) -> f64 {
    let m = r.to_rotation_matrix().into_inner();
    let e = (m * m.transpose() - Matrix3::identity()).abs().max();
    e.max((m.determinant() - 1.0).abs())
}
