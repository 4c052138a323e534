//! Factor graph container, Levenberg-Marquardt on the product manifold and
//! Schur-complement marginalization.
//!
//! Every factor reports its cost as a squared Mahalanobis norm together with
//! the Gauss-Newton Hessian `2JᵀJ` and gradient `2Jᵀr` over the concatenated
//! tangent spaces of its keys.

mod factors;
mod marginalize;
mod optimizer;
mod solver;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector6};

pub use factors::{LinearGaussianFactor, MarginalPrior, PriorFactor};
pub use marginalize::marginalize;
pub use optimizer::{
    hessian_spectrum, marginal_covariance, optimize_lm, reduced_information, schur_complement, warm_restart_optimize,
    LmSettings, OptimizationResult, ReducedInformation, Reduction,
};
pub use solver::{solve_spd, BlockSparseCholesky, DENSE_SOLVER_LIMIT};

use crate::error::{Error, Result};
use crate::geometry::{so3, Se3Pose, SensorState, POSE_DIM, STATE_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum KeyKind {
    FrameState,
    SubmapPose,
    EndpointLeft,
    EndpointRight,
}

/// Variable identifier, unique within one graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Key {
    pub kind: KeyKind,
    pub index: usize,
}

impl Key {
    pub fn frame(index: usize) -> Self {
        Self {
            kind: KeyKind::FrameState,
            index,
        }
    }
    pub fn submap(index: usize) -> Self {
        Self {
            kind: KeyKind::SubmapPose,
            index,
        }
    }
    pub fn left_endpoint(index: usize) -> Self {
        Self {
            kind: KeyKind::EndpointLeft,
            index,
        }
    }
    pub fn right_endpoint(index: usize) -> Self {
        Self {
            kind: KeyKind::EndpointRight,
            index,
        }
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.kind {
            KeyKind::FrameState => "x",
            KeyKind::SubmapPose => "s",
            KeyKind::EndpointLeft => "l",
            KeyKind::EndpointRight => "r",
        };
        write!(f, "{tag}{}", self.index)
    }
}

/// A variable's value. `Vector` lives in a plain Euclidean space.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Pose(Se3Pose),
    State(SensorState),
    Vector(DVector<f64>),
}

impl Value {
    pub fn dim(&self) -> usize {
        match self {
            Value::Pose(_) => POSE_DIM,
            Value::State(_) => STATE_DIM,
            Value::Vector(v) => v.len(),
        }
    }

    /// The pose part of a pose or state value.
    pub fn pose(&self) -> Option<&Se3Pose> {
        match self {
            Value::Pose(p) => Some(p),
            Value::State(s) => Some(&s.pose),
            Value::Vector(_) => None,
        }
    }

    pub fn state(&self) -> Option<&SensorState> {
        match self {
            Value::State(s) => Some(s),
            _ => None,
        }
    }

    pub fn vector(&self) -> Option<&DVector<f64>> {
        match self {
            Value::Vector(v) => Some(v),
            _ => None,
        }
    }

    pub fn retract(&self, delta: &[f64]) -> Value {
        debug_assert_eq!(delta.len(), self.dim());
        match self {
            Value::Pose(p) => Value::Pose(p.retract(&Vector6::from_column_slice(delta))),
            Value::State(s) => Value::State(s.retract(&crate::geometry::StateTangent::from_column_slice(delta))),
            Value::Vector(v) => Value::Vector(v + DVector::from_column_slice(delta)),
        }
    }

    /// Tangent vector taking `self` to `other`; panics on mismatched kinds.
    pub fn local(&self, other: &Value) -> DVector<f64> {
        match (self, other) {
            (Value::Pose(a), Value::Pose(b)) => DVector::from_column_slice(a.local(b).as_slice()),
            (Value::State(a), Value::State(b)) => DVector::from_column_slice(a.local(b).as_slice()),
            (Value::Vector(a), Value::Vector(b)) => b - a,
            _ => panic!("local() between values of different kinds"),
        }
    }

    /// Jacobian of `base.local(x ⊞ ε)` with respect to `ε` at `ε = 0`,
    /// where `self` is `x`.
    pub fn local_jacobian(&self, base: &Value) -> DMatrix<f64> {
        let n = self.dim();
        let mut j = DMatrix::identity(n, n);
        if let (Some(x), Some(b)) = (self.pose(), base.pose()) {
            let delta = b.local(x);
            let phi = delta.fixed_rows::<3>(0).into_owned();
            let jr_inv = so3::right_jacobian_inv(&phi);
            let rot: Matrix3<f64> = so3::exp(&phi).to_rotation_matrix().into_inner();
            j.view_mut((0, 0), (3, 3)).copy_from(&jr_inv);
            j.view_mut((3, 3), (3, 3)).copy_from(&rot);
        }
        j
    }
}

/// Variable assignment keyed in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Values {
    map: BTreeMap<Key, Value>,
}

impl Values {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: Key, value: Value) -> Option<Value> {
        self.map.insert(key, value)
    }

    pub fn remove(&mut self, key: &Key) -> Option<Value> {
        self.map.remove(key)
    }

    pub fn contains(&self, key: &Key) -> bool {
        self.map.contains_key(key)
    }

    pub fn get(&self, key: &Key) -> Result<&Value> {
        self.map.get(key).ok_or(Error::UnknownVariable(*key))
    }

    pub fn pose(&self, key: &Key) -> Result<&Se3Pose> {
        self.get(key)?.pose().ok_or(Error::UnknownVariable(*key))
    }

    pub fn state(&self, key: &Key) -> Result<&SensorState> {
        self.get(key)?.state().ok_or(Error::UnknownVariable(*key))
    }

    pub fn vector(&self, key: &Key) -> Result<&DVector<f64>> {
        self.get(key)?.vector().ok_or(Error::UnknownVariable(*key))
    }

    pub fn keys(&self) -> impl Iterator<Item = &Key> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Key, &Value)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_dim(&self) -> usize {
        self.map.values().map(Value::dim).sum()
    }
}

/// Quadratic model of one factor around the current estimate.
#[derive(Clone, Debug)]
pub struct Linearization {
    pub cost: f64,
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
}

impl Linearization {
    pub fn zeros(dim: usize) -> Self {
        Self {
            cost: 0.0,
            hessian: DMatrix::zeros(dim, dim),
            gradient: DVector::zeros(dim),
        }
    }

    /// Builds `(rᵀr, 2JᵀJ, 2Jᵀr)` from a whitened residual and its Jacobian.
    pub fn from_residual(residual: &DVector<f64>, jacobian: &DMatrix<f64>) -> Self {
        let jt = jacobian.transpose();
        Self {
            cost: residual.norm_squared(),
            hessian: 2.0 * &jt * jacobian,
            gradient: 2.0 * jt * residual,
        }
    }
}

/// A term of the objective.
pub trait Factor: Send + Sync {
    fn keys(&self) -> &[Key];
    fn kind(&self) -> &'static str;
    fn cost(&self, values: &Values) -> Result<f64>;
    /// Cost, Hessian and gradient over the keys' tangents in `keys()` order.
    fn linearize(&self, values: &Values) -> Result<Linearization>;

    /// Linearization used to judge observability. Factors whose Hessian
    /// contains information the measurement does not support override it.
    fn linearize_observability(&self, values: &Values) -> Result<Linearization> {
        self.linearize(values)
    }
}

/// Variables plus factors; a multigraph.
#[derive(Clone, Default)]
pub struct FactorGraph {
    values: Values,
    factors: Vec<Arc<dyn Factor>>,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_variable(&mut self, key: Key, value: Value) -> Result<()> {
        if self.values.contains(&key) {
            return Err(Error::DuplicateVariable(key));
        }
        self.values.insert(key, value);
        Ok(())
    }

    pub fn add_factor(&mut self, factor: impl Factor + 'static) -> Result<()> {
        self.add_shared_factor(Arc::new(factor))
    }

    pub fn add_shared_factor(&mut self, factor: Arc<dyn Factor>) -> Result<()> {
        for k in factor.keys() {
            if !self.values.contains(k) {
                return Err(Error::UnknownVariable(*k));
            }
        }
        self.factors.push(factor);
        Ok(())
    }

    pub fn values(&self) -> &Values {
        &self.values
    }

    pub fn set_values(&mut self, values: Values) {
        self.values = values;
    }

    /// Replaces the value of an existing variable.
    pub fn update_value(&mut self, key: Key, value: Value) -> Result<()> {
        if !self.values.contains(&key) {
            return Err(Error::UnknownVariable(key));
        }
        self.values.insert(key, value);
        Ok(())
    }

    pub fn factors(&self) -> &[Arc<dyn Factor>] {
        &self.factors
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub(crate) fn split_off(&mut self, remove: &[Key]) -> (Vec<Arc<dyn Factor>>, Vec<Value>) {
        let (touching, kept): (Vec<_>, Vec<_>) = std::mem::take(&mut self.factors)
            .into_iter()
            .partition(|f| f.keys().iter().any(|k| remove.contains(k)));
        self.factors = kept;
        let removed = remove.iter().filter_map(|k| self.values.remove(k)).collect();
        (touching, removed)
    }

    pub fn total_cost(&self) -> Result<f64> {
        total_cost(&self.factors, &self.values)
    }

    /// Writes one line per factor: index, kind, keys and cost.
    pub fn dump(&self, out: &mut impl Write) -> Result<()> {
        for (i, f) in self.factors.iter().enumerate() {
            let keys: Vec<String> = f.keys().iter().map(Key::to_string).collect();
            let cost = f.cost(&self.values)?;
            writeln!(out, "{i}\t{}\t{}\t{cost:.9e}", f.kind(), keys.join(","))?;
        }
        Ok(())
    }
}

pub(crate) fn total_cost(factors: &[Arc<dyn Factor>], values: &Values) -> Result<f64> {
    let costs = crate::par::map_chunks(factors, |f| f.cost(values));
    let mut sum = 0.0;
    for c in costs {
        sum += c?;
    }
    Ok(sum)
}

/// Offsets and sizes of each key's tangent inside a factor's linearization.
pub fn local_offsets(values: &Values, keys: &[Key]) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::with_capacity(keys.len());
    let mut off = 0;
    for k in keys {
        let d = values.get(k)?.dim();
        out.push((off, d));
        off += d;
    }
    Ok(out)
}
