use nalgebra::{DMatrix, DVector};

use super::{local_offsets, Factor, Key, Linearization, Value, Values};
use crate::error::Result;

/// Gaussian prior on one variable: cost `δᵀΛδ` with `δ = target ⊟ x`.
#[derive(Clone, Debug)]
pub struct PriorFactor {
    keys: [Key; 1],
    pub target: Value,
    pub information: DMatrix<f64>,
}

impl PriorFactor {
    pub fn new(key: Key, target: Value, information: DMatrix<f64>) -> Self {
        assert_eq!(information.nrows(), target.dim());
        Self {
            keys: [key],
            target,
            information,
        }
    }

    pub fn isotropic(key: Key, target: Value, information: f64) -> Self {
        let n = target.dim();
        Self::new(key, target, DMatrix::identity(n, n) * information)
    }

    /// Per-dimension information; zeros leave a dimension unconstrained.
    pub fn diagonal(key: Key, target: Value, information: &[f64]) -> Self {
        let d = DVector::from_column_slice(information);
        Self::new(key, target, DMatrix::from_diagonal(&d))
    }

    fn error<'v>(&self, values: &'v Values) -> Result<(DVector<f64>, &'v Value)> {
        let x = values.get(&self.keys[0])?;
        Ok((self.target.local(x), x))
    }
}

impl Factor for PriorFactor {
    fn keys(&self) -> &[Key] {
        &self.keys
    }

    fn kind(&self) -> &'static str {
        "prior"
    }

    fn cost(&self, values: &Values) -> Result<f64> {
        let (d, _) = self.error(values)?;
        Ok(d.dot(&(&self.information * &d)))
    }

    fn linearize(&self, values: &Values) -> Result<Linearization> {
        let (d, x) = self.error(values)?;
        let j = x.local_jacobian(&self.target);
        let jt_info = j.transpose() * &self.information;
        Ok(Linearization {
            cost: d.dot(&(&self.information * &d)),
            hessian: 2.0 * &jt_info * &j,
            gradient: 2.0 * jt_info * d,
        })
    }
}

/// Linear measurement `Σ A_k x_k ≈ b` on vector-valued variables.
#[derive(Clone, Debug)]
pub struct LinearGaussianFactor {
    keys: Vec<Key>,
    pub blocks: Vec<DMatrix<f64>>,
    pub rhs: DVector<f64>,
    pub information: DMatrix<f64>,
}

impl LinearGaussianFactor {
    pub fn new(keys: Vec<Key>, blocks: Vec<DMatrix<f64>>, rhs: DVector<f64>, information: DMatrix<f64>) -> Self {
        assert_eq!(keys.len(), blocks.len());
        Self {
            keys,
            blocks,
            rhs,
            information,
        }
    }

    fn residual(&self, values: &Values) -> Result<DVector<f64>> {
        let mut r = -self.rhs.clone();
        for (k, a) in self.keys.iter().zip(&self.blocks) {
            r += a * values.vector(k)?;
        }
        Ok(r)
    }
}

impl Factor for LinearGaussianFactor {
    fn keys(&self) -> &[Key] {
        &self.keys
    }

    fn kind(&self) -> &'static str {
        "linear"
    }

    fn cost(&self, values: &Values) -> Result<f64> {
        let r = self.residual(values)?;
        Ok(r.dot(&(&self.information * &r)))
    }

    fn linearize(&self, values: &Values) -> Result<Linearization> {
        let r = self.residual(values)?;
        let offs = local_offsets(values, &self.keys)?;
        let dim: usize = offs.iter().map(|o| o.1).sum();
        let mut j = DMatrix::zeros(r.len(), dim);
        for ((off, d), a) in offs.iter().zip(&self.blocks) {
            j.view_mut((0, *off), (r.len(), *d)).copy_from(a);
        }
        let jt_info = j.transpose() * &self.information;
        Ok(Linearization {
            cost: r.dot(&(&self.information * &r)),
            hessian: 2.0 * &jt_info * &j,
            gradient: 2.0 * jt_info * r,
        })
    }
}

/// Quadratic left behind by marginalization, expressed on the tangent
/// space of the retained variables at their linearization point:
/// `c + gᵀδ + ½δᵀHδ`.
#[derive(Clone, Debug)]
pub struct MarginalPrior {
    keys: Vec<Key>,
    pub linearization_point: Vec<Value>,
    pub information: DMatrix<f64>,
    pub information_vector: DVector<f64>,
    pub constant: f64,
}

impl MarginalPrior {
    pub fn new(
        keys: Vec<Key>,
        linearization_point: Vec<Value>,
        information: DMatrix<f64>,
        information_vector: DVector<f64>,
        constant: f64,
    ) -> Self {
        Self {
            keys,
            linearization_point,
            information,
            information_vector,
            constant,
        }
    }

    fn delta(&self, values: &Values) -> Result<DVector<f64>> {
        let mut parts = Vec::with_capacity(self.keys.len());
        for (k, lin) in self.keys.iter().zip(&self.linearization_point) {
            parts.push(lin.local(values.get(k)?));
        }
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let mut d = DVector::zeros(total);
        let mut off = 0;
        for p in parts {
            d.rows_mut(off, p.len()).copy_from(&p);
            off += p.len();
        }
        Ok(d)
    }

    fn quadratic(&self, d: &DVector<f64>) -> f64 {
        self.constant + self.information_vector.dot(d) + 0.5 * d.dot(&(&self.information * d))
    }
}

impl Factor for MarginalPrior {
    fn keys(&self) -> &[Key] {
        &self.keys
    }

    fn kind(&self) -> &'static str {
        "marginal"
    }

    fn cost(&self, values: &Values) -> Result<f64> {
        Ok(self.quadratic(&self.delta(values)?))
    }

    fn linearize(&self, values: &Values) -> Result<Linearization> {
        let d = self.delta(values)?;
        let n = d.len();
        let mut j = DMatrix::zeros(n, n);
        let mut off = 0;
        for (k, lin) in self.keys.iter().zip(&self.linearization_point) {
            let jk = values.get(k)?.local_jacobian(lin);
            let m = jk.nrows();
            j.view_mut((off, off), (m, m)).copy_from(&jk);
            off += m;
        }
        let grad_d = &self.information_vector + &self.information * &d;
        let jt = j.transpose();
        Ok(Linearization {
            cost: self.quadratic(&d),
            hessian: &jt * &self.information * &j,
            gradient: jt * grad_d,
        })
    }
}
