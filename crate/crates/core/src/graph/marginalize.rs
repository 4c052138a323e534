use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::optimizer::{block_index, build_normal_equations};
use super::{Factor, FactorGraph, Key, MarginalPrior, Values};
use crate::error::{Error, Result};

/// Removes `remove` from the graph, replacing every factor that touched them
/// by their Schur complement onto the remaining neighbours. Returns the
/// installed prior, or `None` when nothing was left to constrain.
pub fn marginalize(graph: &mut FactorGraph, remove: &[Key]) -> Result<Option<MarginalPrior>> {
    for k in remove {
        graph.values().get(k)?;
    }
    let remove_set: BTreeSet<Key> = remove.iter().copied().collect();
    let components_before = retained_components(graph.factors(), graph.values(), &remove_set, None);

    let touching: Vec<Arc<dyn Factor>> = graph
        .factors()
        .iter()
        .filter(|f| f.keys().iter().any(|k| remove_set.contains(k)))
        .cloned()
        .collect();
    let mut local = Values::new();
    for f in &touching {
        for k in f.keys() {
            local.insert(*k, graph.values().get(k)?.clone());
        }
    }
    for k in &remove_set {
        local.insert(*k, graph.values().get(k)?.clone());
    }

    let ne = build_normal_equations(&touching, &local)?;
    let h = ne.hessian.to_dense();
    let (_, dims, offsets) = block_index(&local);
    let mut marg_idx = Vec::new();
    let mut keep_idx = Vec::new();
    let mut kept_keys = Vec::new();
    let mut kept_values = Vec::new();
    for (b, (k, v)) in local.iter().enumerate() {
        let range = offsets[b]..offsets[b] + dims[b];
        if remove_set.contains(k) {
            marg_idx.extend(range);
        } else {
            keep_idx.extend(range);
            kept_keys.push(*k);
            kept_values.push(v.clone());
        }
    }

    let pick = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |i, j| h[(rows[i], cols[j])]);
    let h_mm = pick(&marg_idx, &marg_idx);
    let h_km = pick(&keep_idx, &marg_idx);
    let h_kk = pick(&keep_idx, &keep_idx);
    let g_m = DVector::from_iterator(marg_idx.len(), marg_idx.iter().map(|&i| ne.gradient[i]));
    let g_k = DVector::from_iterator(keep_idx.len(), keep_idx.iter().map(|&i| ne.gradient[i]));

    let h_mm_inv = match h_mm.clone().cholesky() {
        Some(c) => c.inverse(),
        None => {
            log::warn!("marginalized block is singular; using a pseudo-inverse");
            h_mm.clone()
                .pseudo_inverse(1e-12 * h_mm.amax().max(1.0))
                .map_err(|e| Error::UnderConstrainedGraph(e.to_string()))?
        }
    };
    let k_gain = &h_km * &h_mm_inv;
    let mut info = h_kk - &k_gain * h_km.transpose();
    info = 0.5 * (&info + info.transpose());
    let info_vec = g_k - &k_gain * &g_m;
    let constant = ne.cost - 0.5 * g_m.dot(&(&h_mm_inv * &g_m));

    let prior = (!kept_keys.is_empty()).then(|| MarginalPrior::new(kept_keys, kept_values, info, info_vec, constant));

    let kept: Vec<Arc<dyn Factor>> = graph
        .factors()
        .iter()
        .filter(|f| !f.keys().iter().any(|k| remove_set.contains(k)))
        .cloned()
        .collect();
    let components_after = retained_components(&kept, graph.values(), &remove_set, prior.as_ref());
    if components_after > components_before {
        return Err(Error::DisconnectedGraph);
    }

    graph.split_off(remove);
    if let Some(p) = &prior {
        graph.add_factor(p.clone())?;
    }
    Ok(prior)
}

/// Connected components among the variables not in `excluded`, where paths
/// through excluded variables still count. A marginal prior connects two
/// keys only through a non-zero coupling block.
fn retained_components(
    factors: &[Arc<dyn Factor>],
    values: &Values,
    excluded: &BTreeSet<Key>,
    prior: Option<&MarginalPrior>,
) -> usize {
    let keys: Vec<Key> = values.keys().copied().collect();
    let index: BTreeMap<Key, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let mut parent: Vec<usize> = (0..keys.len()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let union = |p: &mut Vec<usize>, a: usize, b: usize| {
        let (ra, rb) = (find(p, a), find(p, b));
        if ra != rb {
            p[ra.max(rb)] = ra.min(rb);
        }
    };
    for f in factors {
        let ids: Vec<usize> = f.keys().iter().filter_map(|k| index.get(k).copied()).collect();
        for w in ids.windows(2) {
            union(&mut parent, w[0], w[1]);
        }
    }
    if let Some(p) = prior {
        let mut offs = Vec::new();
        let mut off = 0;
        for v in &p.linearization_point {
            offs.push((off, v.dim()));
            off += v.dim();
        }
        let scale = p.information.amax().max(f64::MIN_POSITIVE);
        for a in 0..offs.len() {
            for b in 0..a {
                let block = p.information.view((offs[a].0, offs[b].0), (offs[a].1, offs[b].1));
                if block.amax() > 1e-12 * scale {
                    if let (Some(&ia), Some(&ib)) = (index.get(&p.keys()[a]), index.get(&p.keys()[b])) {
                        union(&mut parent, ia, ib);
                    }
                }
            }
        }
    }
    let mut roots = BTreeSet::new();
    for (i, k) in keys.iter().enumerate() {
        if !excluded.contains(k) {
            roots.insert(find(&mut parent, i));
        }
    }
    roots.len()
}
