use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3, Vector6};

use crate::error::Result;
use crate::geometry::{so3, Se3Pose, SensorState, STATE_DIM};
use crate::graph::{Factor, Key, Linearization, Values};

/// A member state expressed relative to its submap origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeState {
    pub pose: Se3Pose,
    pub velocity: Vector3<f64>,
    pub bias: Vector6<f64>,
}

impl RelativeState {
    /// `T' = T_origin⁻¹ T`, `v' = R_originᵀ v`, `b' = b`.
    pub fn from_world(origin: &Se3Pose, state: &SensorState) -> Self {
        Self {
            pose: origin.inverse().compose(&state.pose),
            velocity: origin.rot.inverse() * state.velocity,
            bias: state.bias(),
        }
    }

    /// Inverse of [`RelativeState::from_world`].
    pub fn to_world(&self, origin: &Se3Pose, stamp: f64) -> SensorState {
        SensorState {
            stamp,
            pose: origin.compose(&self.pose),
            velocity: origin.rot * self.velocity,
            ..Default::default()
        }
        .with_bias(&self.bias)
    }
}

pub type RelativeJacobians = (SMatrix<f64, 15, 6>, SMatrix<f64, 15, 15>);

/// Unwhitened residual `[r_φ, r_ρ, r_v, r_b]` and its Jacobians with respect
/// to the submap pose and the endpoint state.
pub fn relative_state_residual(
    submap: &Se3Pose,
    endpoint: &SensorState,
    stored: &RelativeState,
) -> (SVector<f64, 15>, RelativeJacobians) {
    let rs = submap.rotation_matrix();
    let rs_t = rs.transpose();
    let rp_t = stored.pose.rotation_matrix().transpose();
    let re = endpoint.rotation_matrix();

    let rel = submap.inverse().compose(&endpoint.pose);
    let err = stored.pose.inverse().compose(&rel);
    let r_phi = so3::log(&err.rot);
    let w = rs_t * (endpoint.pose.trans - submap.trans);
    let r_rho = rp_t * (w - stored.pose.trans);
    let v_local = rs_t * endpoint.velocity;
    let r_v = v_local - stored.velocity;
    let r_b = endpoint.bias() - stored.bias;

    let mut r = SVector::<f64, 15>::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&r_phi);
    r.fixed_rows_mut::<3>(3).copy_from(&r_rho);
    r.fixed_rows_mut::<3>(6).copy_from(&r_v);
    r.fixed_rows_mut::<6>(9).copy_from(&r_b);

    let jr_inv = so3::right_jacobian_inv(&r_phi);
    let r_delta: Matrix3<f64> = rs_t * re;

    let mut js = SMatrix::<f64, 15, 6>::zeros();
    js.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-jr_inv * r_delta.transpose()));
    js.fixed_view_mut::<3, 3>(3, 0).copy_from(&(rp_t * so3::hat(&w)));
    js.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-rp_t));
    js.fixed_view_mut::<3, 3>(6, 0).copy_from(&so3::hat(&v_local));

    let mut je = SMatrix::<f64, 15, 15>::zeros();
    je.fixed_view_mut::<3, 3>(0, 0).copy_from(&jr_inv);
    je.fixed_view_mut::<3, 3>(3, 3).copy_from(&(rp_t * r_delta));
    je.fixed_view_mut::<3, 3>(6, 6).copy_from(&rs_t);
    je.fixed_view_mut::<6, 6>(9, 9)
        .copy_from(&SMatrix::<f64, 6, 6>::identity());
    (r, (js, je))
}

/// Near-rigid tie between a submap pose and one of its endpoint states.
#[derive(Clone, Debug)]
pub struct RelativeStateFactor {
    keys: [Key; 2],
    pub stored: RelativeState,
    pub sigma: f64,
}

impl RelativeStateFactor {
    pub fn new(submap: Key, endpoint: Key, stored: RelativeState, sigma: f64) -> Self {
        Self {
            keys: [submap, endpoint],
            stored,
            sigma,
        }
    }

    fn evaluate(&self, values: &Values) -> Result<(SVector<f64, 15>, RelativeJacobians)> {
        let s = values.pose(&self.keys[0])?;
        let e = values.state(&self.keys[1])?;
        Ok(relative_state_residual(s, e, &self.stored))
    }
}

impl Factor for RelativeStateFactor {
    fn keys(&self) -> &[Key] {
        &self.keys
    }

    fn kind(&self) -> &'static str {
        "relative-state"
    }

    fn cost(&self, values: &Values) -> Result<f64> {
        Ok(self.evaluate(values)?.0.norm_squared() / (self.sigma * self.sigma))
    }

    fn linearize(&self, values: &Values) -> Result<Linearization> {
        let (r, (js, je)) = self.evaluate(values)?;
        let inv = 1.0 / self.sigma;
        let mut j = DMatrix::zeros(15, 6 + STATE_DIM);
        j.view_mut((0, 0), (15, 6)).copy_from(&(js * inv));
        j.view_mut((0, 6), (15, 15)).copy_from(&(je * inv));
        Ok(Linearization::from_residual(
            &DVector::from_column_slice((r * inv).as_slice()),
            &j,
        ))
    }
}
