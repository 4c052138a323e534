use nalgebra::{Matrix3, SMatrix, Vector3, Vector6};

use super::{ImuNoiseParams, ImuSample};
use crate::error::{Error, Result};
use crate::geometry::{so3, Rotation};

pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Matrix9x6 = SMatrix<f64, 9, 6>;

/// Bias change (norm of the 6-vector) above which first-order correction is
/// no longer trusted.
pub const DEFAULT_REINTEGRATION_THRESHOLD: f64 = 0.1;

/// Builds the zero-order-hold node list covering `[t0, t1]`.
///
/// The first and last nodes sit exactly on the window edges (interpolated
/// from the bracketing samples, or held from the nearest sample when it lies
/// within `max_gap` of the edge). Node `k` drives the interval up to node
/// `k + 1`.
pub fn integration_nodes(samples: &[ImuSample], t0: f64, t1: f64, max_gap: f64) -> Result<Vec<ImuSample>> {
    if t0.is_nan() || t1.is_nan() || t1 <= t0 {
        return Err(Error::InvalidInterval { start: t0, end: t1 });
    }
    let (first, last) = match (samples.first(), samples.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::ImuCoverageGap { at: t0, gap: t1 - t0 }),
    };
    if first.stamp - t0 > max_gap {
        return Err(Error::ImuCoverageGap {
            at: t0,
            gap: first.stamp - t0,
        });
    }
    if t1 - last.stamp > max_gap {
        return Err(Error::ImuCoverageGap {
            at: t1,
            gap: t1 - last.stamp,
        });
    }

    let sample_at = |t: f64| -> ImuSample {
        let idx = samples.partition_point(|s| s.stamp <= t);
        match idx {
            0 => ImuSample { stamp: t, ..samples[0] },
            i if i == samples.len() => ImuSample {
                stamp: t,
                ..samples[samples.len() - 1]
            },
            i => ImuSample::lerp(&samples[i - 1], &samples[i], t),
        }
    };

    let mut nodes = Vec::new();
    nodes.push(sample_at(t0));
    let start = samples.partition_point(|s| s.stamp <= t0);
    for s in &samples[start..] {
        if s.stamp >= t1 {
            break;
        }
        nodes.push(*s);
    }
    nodes.push(sample_at(t1));

    for w in nodes.windows(2) {
        let gap = w[1].stamp - w[0].stamp;
        if gap > max_gap {
            return Err(Error::ImuCoverageGap { at: w[0].stamp, gap });
        }
    }
    Ok(nodes)
}

/// Incremental preintegration of IMU readings in the body frame of the
/// window start. Gravity is excluded from the deltas.
#[derive(Clone, Debug)]
pub struct Preintegrator {
    pub noise: ImuNoiseParams,
    pub bias_lin: Vector6<f64>,
    pub delta_r: Rotation,
    pub delta_v: Vector3<f64>,
    pub delta_p: Vector3<f64>,
    pub dt_total: f64,
    /// Rows `[δφ, δv, δp]`.
    pub cov: Matrix9,
    /// Rows `[δφ, δv, δp]`, columns `[b_a, b_ω]`.
    pub jac_bias: Matrix9x6,
}

impl Preintegrator {
    pub fn new(bias_lin: Vector6<f64>, noise: ImuNoiseParams) -> Self {
        Self {
            noise,
            bias_lin,
            delta_r: Rotation::identity(),
            delta_v: Vector3::zeros(),
            delta_p: Vector3::zeros(),
            dt_total: 0.0,
            cov: Matrix9::zeros(),
            jac_bias: Matrix9x6::zeros(),
        }
    }

    pub fn integrate(&mut self, accel: &Vector3<f64>, gyro: &Vector3<f64>, dt: f64) {
        let a = accel - self.bias_lin.fixed_rows::<3>(0);
        let w = gyro - self.bias_lin.fixed_rows::<3>(3);
        let dr = self.delta_r.to_rotation_matrix().into_inner();
        let a_hat = so3::hat(&a);
        let step = so3::exp(&(w * dt));
        let step_t = step.inverse().to_rotation_matrix().into_inner();
        let jr = so3::right_jacobian(&(w * dt));
        let dt2 = dt * dt;

        // Noise propagation.
        let mut a_mat = Matrix9::identity();
        a_mat.fixed_view_mut::<3, 3>(0, 0).copy_from(&step_t);
        a_mat.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-dr * a_hat * dt));
        a_mat.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-0.5 * dr * a_hat * dt2));
        a_mat
            .fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(Matrix3::identity() * dt));
        let mut b_mat = SMatrix::<f64, 9, 6>::zeros(); // columns [η_ω, η_a]
        b_mat.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr * dt));
        b_mat.fixed_view_mut::<3, 3>(3, 3).copy_from(&(dr * dt));
        b_mat.fixed_view_mut::<3, 3>(6, 3).copy_from(&(0.5 * dr * dt2));
        let gyro_var = self.noise.gyro_noise_density.powi(2) / dt;
        let accel_var = self.noise.accel_noise_density.powi(2) / dt;
        let mut q = SMatrix::<f64, 6, 6>::zeros();
        for i in 0..3 {
            q[(i, i)] = gyro_var;
            q[(i + 3, i + 3)] = accel_var;
        }
        let mut cov = a_mat * self.cov * a_mat.transpose() + b_mat * q * b_mat.transpose();
        let int_var = self.noise.integration_sigma.powi(2) * dt;
        for i in 6..9 {
            cov[(i, i)] += int_var;
        }
        self.cov = 0.5 * (cov + cov.transpose());

        // Bias Jacobians; position first since it reads the old velocity terms.
        let jr_g = self.jac_bias.fixed_view::<3, 3>(0, 3).into_owned();
        let jv_a = self.jac_bias.fixed_view::<3, 3>(3, 0).into_owned();
        let jv_g = self.jac_bias.fixed_view::<3, 3>(3, 3).into_owned();
        let jp_a = self.jac_bias.fixed_view::<3, 3>(6, 0).into_owned();
        let jp_g = self.jac_bias.fixed_view::<3, 3>(6, 3).into_owned();
        let new_jp_a = jp_a + jv_a * dt - 0.5 * dr * dt2;
        let new_jp_g = jp_g + jv_g * dt - 0.5 * dr * a_hat * jr_g * dt2;
        let new_jv_a = jv_a - dr * dt;
        let new_jv_g = jv_g - dr * a_hat * jr_g * dt;
        let new_jr_g = step_t * jr_g - jr * dt;
        self.jac_bias.fixed_view_mut::<3, 3>(0, 3).copy_from(&new_jr_g);
        self.jac_bias.fixed_view_mut::<3, 3>(3, 0).copy_from(&new_jv_a);
        self.jac_bias.fixed_view_mut::<3, 3>(3, 3).copy_from(&new_jv_g);
        self.jac_bias.fixed_view_mut::<3, 3>(6, 0).copy_from(&new_jp_a);
        self.jac_bias.fixed_view_mut::<3, 3>(6, 3).copy_from(&new_jp_g);

        // Deltas.
        let acc_rot = self.delta_r * a;
        self.delta_p += self.delta_v * dt + 0.5 * acc_rot * dt2;
        self.delta_v += acc_rot * dt;
        self.delta_r *= step;
        self.delta_r.renormalize();
        self.dt_total += dt;
    }

    pub fn finish(self, start: f64, end: f64) -> PreintegratedImu {
        PreintegratedImu {
            start,
            end,
            delta_r: self.delta_r,
            delta_v: self.delta_v,
            delta_p: self.delta_p,
            dt_total: self.dt_total,
            cov: self.cov,
            bias_lin: self.bias_lin,
            jac_bias: self.jac_bias,
        }
    }
}

/// Relative motion accumulated between two stamps.
#[derive(Clone, Debug, PartialEq)]
pub struct PreintegratedImu {
    pub start: f64,
    pub end: f64,
    pub delta_r: Rotation,
    pub delta_v: Vector3<f64>,
    pub delta_p: Vector3<f64>,
    pub dt_total: f64,
    pub cov: Matrix9,
    pub bias_lin: Vector6<f64>,
    pub jac_bias: Matrix9x6,
}

/// Integrates all samples over `[t_i, t_j]` at the bias `bias_lin`.
pub fn preintegrate(
    samples: &[ImuSample],
    t_i: f64,
    t_j: f64,
    bias_lin: &Vector6<f64>,
    noise: &ImuNoiseParams,
    max_gap: f64,
) -> Result<PreintegratedImu> {
    let nodes = integration_nodes(samples, t_i, t_j, max_gap)?;
    let mut pre = Preintegrator::new(*bias_lin, *noise);
    for w in nodes.windows(2) {
        let dt = w[1].stamp - w[0].stamp;
        if dt > 0.0 {
            pre.integrate(&w[0].accel, &w[0].gyro, dt);
        }
    }
    Ok(pre.finish(t_i, t_j))
}

/// Deltas adjusted to a new bias estimate.
#[derive(Clone, Copy, Debug)]
pub struct BiasCorrected {
    pub delta_r: Rotation,
    pub delta_v: Vector3<f64>,
    pub delta_p: Vector3<f64>,
}

/// First-order bias update of the preintegrated deltas.
pub fn correct_for_bias(pre: &PreintegratedImu, new_bias: &Vector6<f64>, threshold: f64) -> Result<BiasCorrected> {
    let db = new_bias - pre.bias_lin;
    let norm = db.norm();
    if norm > threshold {
        return Err(Error::RequiresReintegration { delta: norm });
    }
    let dbg = db.fixed_rows::<3>(3).into_owned();
    let jr_g = pre.jac_bias.fixed_view::<3, 3>(0, 3);
    let jv = pre.jac_bias.fixed_view::<3, 6>(3, 0);
    let jp = pre.jac_bias.fixed_view::<3, 6>(6, 0);
    let mut delta_r = pre.delta_r * so3::exp(&(jr_g * dbg));
    delta_r.renormalize();
    Ok(BiasCorrected {
        delta_r,
        delta_v: pre.delta_v + jv * db,
        delta_p: pre.delta_p + jp * db,
    })
}
