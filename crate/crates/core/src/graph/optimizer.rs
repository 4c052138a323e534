use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::solver::{solve_spd, BlockMatrix};
use super::{local_offsets, total_cost, Factor, FactorGraph, Key, Linearization, Values};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct LmSettings {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub max_lambda: f64,
    pub relative_cost_tolerance: f64,
    pub update_tolerance: f64,
    /// When set, the converged system is rejected as under-constrained if
    /// the smallest eigenvalue of the Jacobi-scaled Hessian is below this.
    pub degeneracy_threshold: Option<f64>,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            max_iterations: 64,
            initial_lambda: 1e-5,
            max_lambda: 1e12,
            relative_cost_tolerance: 1e-9,
            update_tolerance: 1e-9,
            degeneracy_threshold: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizationResult {
    pub values: Values,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
}

pub(crate) struct NormalEquations {
    pub hessian: BlockMatrix,
    pub gradient: DVector<f64>,
    pub cost: f64,
}

pub(crate) fn block_index(values: &Values) -> (BTreeMap<Key, usize>, Vec<usize>, Vec<usize>) {
    let mut index = BTreeMap::new();
    let mut dims = Vec::new();
    let mut offsets = Vec::new();
    let mut off = 0;
    for (i, (k, v)) in values.iter().enumerate() {
        index.insert(*k, i);
        dims.push(v.dim());
        offsets.push(off);
        off += v.dim();
    }
    (index, dims, offsets)
}

/// Linearizes every factor (in parallel) and sums them in factor order.
pub(crate) fn build_normal_equations(factors: &[Arc<dyn Factor>], values: &Values) -> Result<NormalEquations> {
    assemble_normal_equations(factors, values, |f| f.linearize(values))
}

fn assemble_normal_equations(
    factors: &[Arc<dyn Factor>],
    values: &Values,
    linearize: impl Fn(&Arc<dyn Factor>) -> Result<Linearization> + Sync,
) -> Result<NormalEquations> {
    let (index, dims, offsets) = block_index(values);
    let total: usize = dims.iter().sum();
    let lins = crate::par::map_chunks(factors, |f| linearize(f));
    let mut hessian = BlockMatrix::new(dims);
    let mut gradient = DVector::zeros(total);
    let mut cost = 0.0;
    for (f, lin) in factors.iter().zip(lins) {
        let lin = lin?;
        cost += lin.cost;
        let keys = f.keys();
        let local = local_offsets(values, keys)?;
        for (a, ka) in keys.iter().enumerate() {
            let ia = index[ka];
            let (la, da) = local[a];
            let mut g = gradient.rows_mut(offsets[ia], da);
            g += lin.gradient.rows(la, da);
            for (b, kb) in keys.iter().enumerate().take(a + 1) {
                let ib = index[kb];
                let (lb, db) = local[b];
                hessian.add(ia, ib, &lin.hessian.view((la, lb), (da, db)).into_owned());
            }
        }
    }
    Ok(NormalEquations {
        hessian,
        gradient,
        cost,
    })
}

fn check_constrained(graph: &FactorGraph) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for f in graph.factors() {
        seen.extend(f.keys().iter().copied());
    }
    for k in graph.values().keys() {
        if !seen.contains(k) {
            return Err(Error::UnderConstrainedGraph(format!("variable {k} has no factor")));
        }
    }
    Ok(())
}

fn retract_all(values: &Values, delta: &DVector<f64>) -> Values {
    let mut out = Values::new();
    let mut off = 0;
    for (k, v) in values.iter() {
        let d = v.dim();
        out.insert(*k, v.retract(&delta.as_slice()[off..off + d]));
        off += d;
    }
    out
}

/// Eigenvalues (ascending) of `D^{-1/2} H D^{-1/2}` with `D = diag(H)`.
pub fn hessian_spectrum(graph: &FactorGraph) -> Result<DVector<f64>> {
    let ne = build_normal_equations(graph.factors(), graph.values())?;
    Ok(scaled_spectrum(&ne.hessian.to_dense()))
}

/// How [`reduced_spectrum`] treats a variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Part of the analyzed block.
    Keep,
    /// Marginalized out by a Schur complement.
    Eliminate,
    /// Held fixed: its rows and columns are dropped.
    Condition,
}

/// Information matrix of a subset of variables.
#[derive(Clone, Debug)]
pub struct ReducedInformation {
    /// Information (`H / 2`) over the kept tangents.
    pub matrix: DMatrix<f64>,
    /// Kept variables with their offset and dimension in `matrix`.
    pub blocks: Vec<(Key, usize, usize)>,
}

/// Information of the kept variables from the factors' observability
/// linearizations, with eliminated variables marginalized out by a Schur
/// complement and conditioned ones held fixed.
pub fn reduced_information(graph: &FactorGraph, role: impl Fn(&Key) -> Reduction) -> Result<ReducedInformation> {
    let ne = assemble_normal_equations(graph.factors(), graph.values(), |f| {
        f.linearize_observability(graph.values())
    })?;
    let h = ne.hessian.to_dense() * 0.5;
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut blocks = Vec::new();
    let mut off = 0;
    for (k, v) in graph.values().iter() {
        let range = off..off + v.dim();
        match role(k) {
            Reduction::Keep => {
                blocks.push((*k, kept.len(), v.dim()));
                kept.extend(range);
            }
            Reduction::Eliminate => dropped.extend(range),
            Reduction::Condition => {}
        }
        off += v.dim();
    }
    let matrix = schur_complement(&h, &kept, &dropped)?;
    Ok(ReducedInformation { matrix, blocks })
}

/// `H_kk - H_kd H_dd⁻¹ H_dk` for index sets `keep` and `drop`.
pub fn schur_complement(h: &DMatrix<f64>, keep: &[usize], drop: &[usize]) -> Result<DMatrix<f64>> {
    let pick = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |i, j| h[(rows[i], cols[j])]);
    let h_kk = pick(keep, keep);
    if drop.is_empty() {
        return Ok(h_kk);
    }
    let h_kd = pick(keep, drop);
    let chol = pick(drop, drop)
        .cholesky()
        .ok_or_else(|| Error::UnderConstrainedGraph("eliminated block is singular".into()))?;
    Ok(&h_kk - &h_kd * chol.solve(&h_kd.transpose()))
}

fn scaled_spectrum(h: &DMatrix<f64>) -> DVector<f64> {
    let scale = DVector::from_iterator(h.nrows(), h.diagonal().iter().map(|d| 1.0 / d.max(1e-300).sqrt()));
    let scaled = DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| h[(i, j)] * scale[i] * scale[j]);
    let mut ev = SymmetricEigen::new(scaled).eigenvalues;
    ev.as_mut_slice().sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Covariance of one variable's tangent at the current values. With costs
/// being squared Mahalanobis norms the information matrix is `H / 2`.
pub fn marginal_covariance(graph: &FactorGraph, key: &Key) -> Result<DMatrix<f64>> {
    let ne = build_normal_equations(graph.factors(), graph.values())?;
    let (index, dims, offsets) = block_index(graph.values());
    let b = *index.get(key).ok_or(Error::UnknownVariable(*key))?;
    let info = ne.hessian.to_dense() * 0.5;
    let cov = info
        .cholesky()
        .ok_or_else(|| Error::UnderConstrainedGraph("information matrix is singular".into()))?
        .inverse();
    Ok(cov.view((offsets[b], offsets[b]), (dims[b], dims[b])).into_owned())
}

/// Levenberg-Marquardt from the graph's current values.
pub fn optimize_lm(graph: &FactorGraph, settings: &LmSettings) -> Result<OptimizationResult> {
    check_constrained(graph)?;
    let factors = graph.factors();
    let mut values = graph.values().clone();
    let mut ne = build_normal_equations(factors, &values)?;
    let initial_cost = ne.cost;
    let mut cost = ne.cost;
    let mut lambda = settings.initial_lambda;
    let mut iterations = 0;

    while iterations < settings.max_iterations {
        iterations += 1;
        let diag = ne.hessian.diagonal();
        let done;
        loop {
            let mut damped = ne.hessian.clone();
            damped.add_to_diagonal(|i, _| lambda * diag[i].max(1e-9));
            let Some(step) = solve_spd(&damped, &(-&ne.gradient)) else {
                lambda *= 4.0;
                if lambda > settings.max_lambda {
                    return Err(Error::NotConverged {
                        best: Box::new(values),
                        cost,
                    });
                }
                continue;
            };
            if step.norm() < settings.update_tolerance {
                done = true;
                break;
            }
            let candidate = retract_all(&values, &step);
            let new_cost = total_cost(factors, &candidate)?;
            if new_cost.is_finite() && new_cost <= cost {
                let rel = (cost - new_cost) / cost.abs().max(f64::MIN_POSITIVE);
                values = candidate;
                cost = new_cost;
                lambda = (lambda * 0.5).max(1e-12);
                done = rel < settings.relative_cost_tolerance;
                break;
            }
            // A rejected step whose predicted decrease is negligible means the
            // remaining change is below what the cost can resolve.
            let damping: f64 = step.iter().enumerate().map(|(i, d)| diag[i].max(1e-9) * d * d).sum();
            let predicted = 0.5 * (lambda * damping - ne.gradient.dot(&step));
            if predicted <= settings.relative_cost_tolerance * cost.abs() {
                done = true;
                break;
            }
            lambda *= 4.0;
            if lambda > settings.max_lambda {
                // No descent direction left at any damping.
                done = true;
                break;
            }
        }
        if done {
            break;
        }
        ne = build_normal_equations(factors, &values)?;
        cost = ne.cost;
    }

    if let Some(threshold) = settings.degeneracy_threshold {
        let ne = build_normal_equations(factors, &values)?;
        let ev = scaled_spectrum(&ne.hessian.to_dense());
        let min = ev[0];
        if min.is_nan() || min < threshold {
            return Err(Error::UnderConstrainedGraph(format!(
                "smallest scaled Hessian eigenvalue {min:.3e} below {threshold:.3e}"
            )));
        }
    }

    log::trace!("lm: {iterations} iterations, cost {initial_cost:.6e} -> {cost:.6e}");
    Ok(OptimizationResult {
        values,
        initial_cost,
        final_cost: cost,
        iterations,
    })
}

/// Starts from `previous` for variables it covers and from the graph's own
/// initial values otherwise.
pub fn warm_restart_optimize(
    graph: &FactorGraph,
    previous: &Values,
    settings: &LmSettings,
) -> Result<OptimizationResult> {
    let mut g = graph.clone();
    let mut start = graph.values().clone();
    for (k, v) in previous.iter() {
        if start.contains(k) {
            start.insert(*k, v.clone());
        }
    }
    g.set_values(start);
    optimize_lm(&g, settings)
}
