//! Symmetric positive-definite solvers on block-structured normal equations.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Cholesky, DMatrix, DVector};

/// Systems with at least this many unknowns use the block-sparse factorization.
pub const DENSE_SOLVER_LIMIT: usize = 600;

/// Symmetric matrix stored as dense blocks of the lower triangle.
#[derive(Clone, Debug)]
pub struct BlockMatrix {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    blocks: BTreeMap<(usize, usize), DMatrix<f64>>,
}

impl BlockMatrix {
    pub fn new(dims: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(dims.len());
        let mut off = 0;
        for d in &dims {
            offsets.push(off);
            off += d;
        }
        Self {
            dims,
            offsets,
            blocks: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn num_blocks(&self) -> usize {
        self.dims.len()
    }

    /// Adds `m` at block `(row, col)`; the mirrored block is implied.
    pub fn add(&mut self, row: usize, col: usize, m: &DMatrix<f64>) {
        let (r, c, m) = if row >= col {
            (row, col, m.clone())
        } else {
            (col, row, m.transpose())
        };
        let (dr, dc) = (self.dims[r], self.dims[c]);
        self.blocks.entry((r, c)).and_modify(|b| *b += &m).or_insert_with(|| {
            debug_assert_eq!((m.nrows(), m.ncols()), (dr, dc));
            m
        });
    }

    /// Adds `f(index, current)` to every diagonal entry.
    pub fn add_to_diagonal(&mut self, mut f: impl FnMut(usize, f64) -> f64) {
        for i in 0..self.dims.len() {
            let d = self.dims[i];
            let off = self.offsets[i];
            let b = self.blocks.entry((i, i)).or_insert_with(|| DMatrix::zeros(d, d));
            for k in 0..d {
                b[(k, k)] += f(off + k, b[(k, k)]);
            }
        }
    }

    pub fn diagonal(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        for i in 0..self.dims.len() {
            if let Some(b) = self.blocks.get(&(i, i)) {
                for k in 0..self.dims[i] {
                    out[self.offsets[i] + k] = b[(k, k)];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for (&(r, c), b) in &self.blocks {
            let (ro, co) = (self.offsets[r], self.offsets[c]);
            out.view_mut((ro, co), (b.nrows(), b.ncols())).copy_from(b);
            if r != c {
                out.view_mut((co, ro), (b.ncols(), b.nrows())).copy_from(&b.transpose());
            }
        }
        out
    }

    pub fn block_dims(&self) -> &[usize] {
        &self.dims
    }
}

/// Solves `A x = b` for symmetric positive-definite `A`; `None` if the
/// factorization breaks down.
pub fn solve_spd(a: &BlockMatrix, b: &DVector<f64>) -> Option<DVector<f64>> {
    if a.dim() < DENSE_SOLVER_LIMIT {
        let chol = Cholesky::new(a.to_dense())?;
        let x = chol.solve(b);
        x.iter().all(|v| v.is_finite()).then_some(x)
    } else {
        BlockSparseCholesky::factor(a)?.solve(b)
    }
}

/// Right-looking block Cholesky with a minimum-degree elimination order.
#[derive(Clone, Debug)]
pub struct BlockSparseCholesky {
    /// Elimination position → block index.
    order: Vec<usize>,
    dims: Vec<usize>,
    offsets: Vec<usize>,
    /// Column `j` (elimination position) → rows `i ≥ j` with their blocks.
    columns: Vec<BTreeMap<usize, DMatrix<f64>>>,
}

impl BlockSparseCholesky {
    pub fn factor(a: &BlockMatrix) -> Option<Self> {
        let n = a.num_blocks();
        let order = min_degree_order(n, a.blocks.keys().copied());
        let mut position = vec![0; n];
        for (p, &b) in order.iter().enumerate() {
            position[b] = p;
        }

        let mut columns: Vec<BTreeMap<usize, DMatrix<f64>>> = vec![BTreeMap::new(); n];
        for (&(r, c), m) in &a.blocks {
            let (pr, pc) = (position[r], position[c]);
            if pr >= pc {
                columns[pc].insert(pr, m.clone());
            } else {
                columns[pr].insert(pc, m.transpose());
            }
        }

        for j in 0..n {
            let diag = columns[j].remove(&j)?;
            let l_jj = Cholesky::new(diag)?.l();
            let rows: Vec<usize> = columns[j].keys().copied().collect();
            for &i in &rows {
                let a_ij = &columns[j][&i];
                // L_ij = A_ij L_jj⁻ᵀ
                let l_ij = l_jj.solve_lower_triangular(&a_ij.transpose())?.transpose();
                columns[j].insert(i, l_ij);
            }
            for (x, &k) in rows.iter().enumerate() {
                let l_kj = columns[j][&k].clone();
                for &i in &rows[x..] {
                    let upd = &columns[j][&i] * l_kj.transpose();
                    let target = columns[k]
                        .entry(i)
                        .or_insert_with(|| DMatrix::zeros(upd.nrows(), upd.ncols()));
                    *target -= upd;
                }
            }
            columns[j].insert(j, l_jj);
        }

        Some(Self {
            order,
            dims: a.dims.clone(),
            offsets: a.offsets.clone(),
            columns,
        })
    }

    pub fn solve(&self, b: &DVector<f64>) -> Option<DVector<f64>> {
        let n = self.order.len();
        let mut y: Vec<DVector<f64>> = self
            .order
            .iter()
            .map(|&blk| b.rows(self.offsets[blk], self.dims[blk]).into_owned())
            .collect();
        for j in 0..n {
            let yj = self.columns[j][&j].solve_lower_triangular(&y[j])?;
            for (&i, l_ij) in self.columns[j].range(j + 1..) {
                y[i] -= l_ij * &yj;
            }
            y[j] = yj;
        }
        for j in (0..n).rev() {
            let mut rhs = y[j].clone();
            for (&i, l_ij) in self.columns[j].range(j + 1..) {
                rhs -= l_ij.transpose() * &y[i];
            }
            y[j] = self.columns[j][&j].tr_solve_lower_triangular(&rhs)?;
        }
        let mut x = DVector::zeros(b.len());
        for (p, &blk) in self.order.iter().enumerate() {
            x.rows_mut(self.offsets[blk], self.dims[blk]).copy_from(&y[p]);
        }
        x.iter().all(|v| v.is_finite()).then_some(x)
    }

    /// Number of stored off-diagonal blocks, fill-in included.
    pub fn fill(&self) -> usize {
        self.columns.iter().map(|c| c.len() - 1).sum()
    }
}

fn min_degree_order(n: usize, pattern: impl Iterator<Item = (usize, usize)>) -> Vec<usize> {
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for (r, c) in pattern {
        if r != c {
            adj[r].insert(c);
            adj[c].insert(r);
        }
    }
    let mut alive = vec![true; n];
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let v = (0..n)
            .filter(|&v| alive[v])
            .min_by_key(|&v| (adj[v].len(), v))
            .expect("a live vertex remains");
        alive[v] = false;
        order.push(v);
        let nbrs: Vec<usize> = adj[v].iter().copied().collect();
        for &a in &nbrs {
            adj[a].remove(&v);
            for &b in &nbrs {
                if a != b {
                    adj[a].insert(b);
                }
            }
        }
        adj[v].clear();
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_block_system(rng: &mut ChaCha8Rng, n: usize, extra_edges: usize) -> BlockMatrix {
        let dims: Vec<usize> = (0..n).map(|i| if i % 3 == 0 { 6 } else { 15 }).collect();
        let mut a = BlockMatrix::new(dims.clone());
        let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (i, i - 1)).collect();
        for _ in 0..extra_edges {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i != j {
                edges.push((i.max(j), i.min(j)));
            }
        }
        for (i, j) in edges {
            let rows = dims[i] + dims[j];
            let jac = DMatrix::from_fn(rows, rows, |_, _| rng.random_range(-1.0..1.0));
            let h = jac.transpose() * jac;
            a.add(i, i, &h.view((0, 0), (dims[i], dims[i])).into_owned());
            a.add(j, j, &h.view((dims[i], dims[i]), (dims[j], dims[j])).into_owned());
            a.add(i, j, &h.view((0, dims[i]), (dims[i], dims[j])).into_owned());
        }
        a.add_to_diagonal(|_, _| 1e-3);
        a
    }

    #[test]
    fn sparse_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..5 {
            let a = random_block_system(&mut rng, 20 + trial * 7, 10);
            let b = DVector::from_fn(a.dim(), |_, _| rng.random_range(-1.0..1.0));
            let dense = Cholesky::new(a.to_dense()).unwrap().solve(&b);
            let sparse = BlockSparseCholesky::factor(&a).unwrap().solve(&b).unwrap();
            let rel = (dense - &sparse).norm() / sparse.norm();
            assert!(rel < 1e-9, "relative difference {rel}");
        }
    }

    #[test]
    fn chain_has_no_fill() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_block_system(&mut rng, 50, 0);
        let f = BlockSparseCholesky::factor(&a).unwrap();
        assert_eq!(f.fill(), 49);
    }

    #[test]
    fn indefinite_matrix_fails() {
        let mut a = BlockMatrix::new(vec![2, 2]);
        a.add(0, 0, &DMatrix::identity(2, 2));
        a.add(1, 1, &(-DMatrix::identity(2, 2)));
        assert!(BlockSparseCholesky::factor(&a).is_none());
        assert!(solve_spd(&a, &DVector::zeros(4)).is_none());
    }
}
