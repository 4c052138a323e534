use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3, Vector6};

use super::preintegration::{correct_for_bias, preintegrate, Matrix9, PreintegratedImu};
use super::{ImuNoiseParams, ImuSample};
use crate::error::{Error, Result};
use crate::geometry::{so3, SensorState, STATE_DIM};
use crate::graph::{Factor, Key, Linearization, Values};

pub type Vector15 = SVector<f64, 15>;
pub type Matrix15 = SMatrix<f64, 15, 15>;

/// Whitened 15-dimensional residual (rotation, velocity, position, bias
/// walk) and its Jacobians with respect to both state tangents.
#[derive(Clone, Debug)]
pub struct ImuResidual {
    pub whitened: Vector15,
    /// Rotation, velocity and position errors before whitening.
    pub raw: SVector<f64, 9>,
    pub jac_i: Matrix15,
    pub jac_j: Matrix15,
}

impl ImuResidual {
    pub fn cost(&self) -> f64 {
        self.whitened.norm_squared()
    }
}

/// Evaluates the preintegrated-motion residual between two states.
///
/// The deltas are corrected to the bias carried by `state_i`; a bias step
/// beyond `reintegration_threshold` yields `RequiresReintegration`.
pub fn imu_factor_residual(
    state_i: &SensorState,
    state_j: &SensorState,
    pre: &PreintegratedImu,
    noise: &ImuNoiseParams,
    reintegration_threshold: f64,
) -> Result<ImuResidual> {
    let corrected = correct_for_bias(pre, &state_i.bias(), reintegration_threshold)?;
    let g = noise.gravity;
    let dt = pre.dt_total;
    let r_i = state_i.rotation_matrix();
    let r_j = state_j.rotation_matrix();
    let r_i_t = r_i.transpose();

    let err_rot = corrected.delta_r.inverse() * state_i.pose.rot.inverse() * state_j.pose.rot;
    let r_rot = so3::log(&err_rot);
    let vel_term = state_j.velocity - state_i.velocity - g * dt;
    let pos_term = state_j.pose.trans - state_i.pose.trans - state_i.velocity * dt - 0.5 * g * dt * dt;
    let r_vel = r_i_t * vel_term - corrected.delta_v;
    let r_pos = r_i_t * pos_term - corrected.delta_p;

    let mut raw = SVector::<f64, 9>::zeros();
    raw.fixed_rows_mut::<3>(0).copy_from(&r_rot);
    raw.fixed_rows_mut::<3>(3).copy_from(&r_vel);
    raw.fixed_rows_mut::<3>(6).copy_from(&r_pos);

    // Unwhitened Jacobians of the 9 motion rows.
    let mut ji = SMatrix::<f64, 9, 15>::zeros();
    let mut jj = SMatrix::<f64, 9, 15>::zeros();
    let jr_inv = so3::right_jacobian_inv(&r_rot);
    let db = state_i.bias() - pre.bias_lin;
    let jr_g = pre.jac_bias.fixed_view::<3, 3>(0, 3).into_owned();
    let dbg: Vector3<f64> = db.fixed_rows::<3>(3).into_owned();
    let exp_r_t: Matrix3<f64> = so3::exp(&r_rot).inverse().to_rotation_matrix().into_inner();
    let jr_corr = so3::right_jacobian(&(jr_g * dbg));

    ji.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-jr_inv * r_j.transpose() * r_i));
    jj.fixed_view_mut::<3, 3>(0, 0).copy_from(&jr_inv);
    ji.fixed_view_mut::<3, 3>(0, 12)
        .copy_from(&(-jr_inv * exp_r_t * jr_corr * jr_g));

    ji.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&so3::hat(&(r_i_t * vel_term)));
    ji.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-r_i_t));
    jj.fixed_view_mut::<3, 3>(3, 6).copy_from(&r_i_t);
    ji.fixed_view_mut::<3, 6>(3, 9)
        .copy_from(&(-pre.jac_bias.fixed_view::<3, 6>(3, 0)));

    ji.fixed_view_mut::<3, 3>(6, 0)
        .copy_from(&so3::hat(&(r_i_t * pos_term)));
    ji.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-Matrix3::identity()));
    jj.fixed_view_mut::<3, 3>(6, 3).copy_from(&(r_i_t * r_j));
    ji.fixed_view_mut::<3, 3>(6, 6).copy_from(&(-r_i_t * dt));
    ji.fixed_view_mut::<3, 6>(6, 9)
        .copy_from(&(-pre.jac_bias.fixed_view::<3, 6>(6, 0)));

    let whiten = whitening(&pre.cov)?;
    let walk = bias_walk_sigmas(noise, dt);
    let bias_err: Vector6<f64> = state_j.bias() - state_i.bias();

    let mut whitened = Vector15::zeros();
    whitened.fixed_rows_mut::<9>(0).copy_from(&(whiten * raw));
    let mut jac_i = Matrix15::zeros();
    let mut jac_j = Matrix15::zeros();
    jac_i.fixed_view_mut::<9, 15>(0, 0).copy_from(&(whiten * ji));
    jac_j.fixed_view_mut::<9, 15>(0, 0).copy_from(&(whiten * jj));
    for k in 0..6 {
        whitened[9 + k] = bias_err[k] / walk[k];
        jac_i[(9 + k, 9 + k)] = -1.0 / walk[k];
        jac_j[(9 + k, 9 + k)] = 1.0 / walk[k];
    }
    Ok(ImuResidual {
        whitened,
        raw,
        jac_i,
        jac_j,
    })
}

/// `L⁻¹` for `cov = L Lᵀ`, so that `L⁻¹ r` has identity covariance.
fn whitening(cov: &Matrix9) -> Result<Matrix9> {
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::UnderConstrainedGraph("preintegration covariance is not positive definite".into()))?;
    let l = chol.l();
    l.try_inverse()
        .ok_or_else(|| Error::UnderConstrainedGraph("singular preintegration covariance".into()))
}

fn bias_walk_sigmas(noise: &ImuNoiseParams, dt: f64) -> [f64; 6] {
    let sa = noise.accel_bias_walk * dt.sqrt();
    let sg = noise.gyro_bias_walk * dt.sqrt();
    [sa, sa, sa, sg, sg, sg]
}

/// Graph factor tying two sensor states through preintegrated IMU motion.
///
/// When raw samples are attached, a bias estimate that strays beyond the
/// first-order validity threshold triggers re-integration at that bias.
#[derive(Clone, Debug)]
pub struct ImuFactor {
    keys: [Key; 2],
    pub preintegrated: PreintegratedImu,
    pub noise: ImuNoiseParams,
    pub samples: Option<Vec<ImuSample>>,
    pub reintegration_threshold: f64,
    pub max_gap: f64,
}

impl ImuFactor {
    pub fn new(key_i: Key, key_j: Key, preintegrated: PreintegratedImu, noise: ImuNoiseParams) -> Self {
        Self {
            keys: [key_i, key_j],
            preintegrated,
            noise,
            samples: None,
            reintegration_threshold: super::DEFAULT_REINTEGRATION_THRESHOLD,
            max_gap: f64::INFINITY,
        }
    }

    pub fn with_samples(mut self, samples: Vec<ImuSample>, max_gap: f64) -> Self {
        self.samples = Some(samples);
        self.max_gap = max_gap;
        self
    }

    pub fn residual(&self, values: &Values) -> Result<ImuResidual> {
        let si = values.state(&self.keys[0])?;
        let sj = values.state(&self.keys[1])?;
        match imu_factor_residual(si, sj, &self.preintegrated, &self.noise, self.reintegration_threshold) {
            Err(Error::RequiresReintegration { delta }) => {
                let Some(samples) = &self.samples else {
                    return Err(Error::RequiresReintegration { delta });
                };
                let pre = preintegrate(
                    samples,
                    self.preintegrated.start,
                    self.preintegrated.end,
                    &si.bias(),
                    &self.noise,
                    self.max_gap,
                )?;
                imu_factor_residual(si, sj, &pre, &self.noise, f64::INFINITY)
            }
            other => other,
        }
    }
}

impl Factor for ImuFactor {
    fn keys(&self) -> &[Key] {
        &self.keys
    }

    fn kind(&self) -> &'static str {
        "imu-preintegration"
    }

    fn cost(&self, values: &Values) -> Result<f64> {
        Ok(self.residual(values)?.cost())
    }

    fn linearize(&self, values: &Values) -> Result<Linearization> {
        let res = self.residual(values)?;
        let mut j = DMatrix::zeros(15, 2 * STATE_DIM);
        j.view_mut((0, 0), (15, 15)).copy_from(&res.jac_i);
        j.view_mut((0, 15), (15, 15)).copy_from(&res.jac_j);
        let r = DVector::from_column_slice(res.whitened.as_slice());
        Ok(Linearization::from_residual(&r, &j))
    }
}
