//! Distribution-to-distribution registration against Gaussian voxel maps.
//!
//! `T_ij` maps points of frame `i` into the coordinates of frame `j`; for
//! world poses `T_i`, `T_j` it is `T_j⁻¹ T_i`. Pose perturbations are
//! right-multiplicative on both sides.

mod factor;
mod voxelmap;

use std::sync::Arc;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};

pub use factor::{MatchingCostFactor, DEFAULT_ASSOCIATION_ROT_TOLERANCE, DEFAULT_ASSOCIATION_TRANS_TOLERANCE};
pub use voxelmap::{voxel_key, GaussianVoxelMap, VoxelCell, VoxelKey};

use crate::error::{Error, Result};
use crate::geometry::{so3, Gaussian3, Se3Pose};
use crate::graph::{optimize_lm, FactorGraph, Key, LmSettings, Value};
use crate::preprocess::Frame;

/// Default minimum number of matched points for a usable constraint.
pub const DEFAULT_MIN_INLIERS: usize = 10;

pub type Matrix6 = SMatrix<f64, 6, 6>;
pub type Vector6 = SVector<f64, 6>;
type Matrix12 = SMatrix<f64, 12, 12>;
type Vector12 = SVector<f64, 12>;

/// One distribution-to-distribution term.
#[derive(Clone, Copy, Debug)]
pub struct D2dTerm {
    pub error: f64,
    pub residual: Vector3<f64>,
    pub weight: Matrix3<f64>,
}

/// Mahalanobis error between a transformed point Gaussian and a voxel Gaussian.
pub fn d2d_error(point: &Gaussian3, voxel: &Gaussian3, t_ij: &Se3Pose) -> D2dTerm {
    let r = t_ij.rotation_matrix();
    let residual = voxel.mean - t_ij.apply(&point.mean);
    let combined = voxel.cov + r * point.cov * r.transpose();
    let weight = combined
        .try_inverse()
        .expect("combined covariance is regularized and invertible");
    D2dTerm {
        error: residual.dot(&(weight * residual)),
        residual,
        weight,
    }
}

fn point_gaussian(frame: &Frame, k: usize) -> Gaussian3 {
    Gaussian3::new(frame.points[k], frame.covs[k])
}

/// Sum of d2d errors over points that land in an occupied voxel, and the
/// number of such points.
pub fn matching_cost(frame: &Frame, map: &GaussianVoxelMap, t_ij: &Se3Pose) -> (f64, usize) {
    assert!(frame.is_empty() || frame.has_covariances());
    crate::par::fold_chunks(
        &frame.points,
        || (0.0, 0usize),
        |acc, k, p| {
            if let Some(cell) = map.lookup(&t_ij.apply(p)) {
                acc.0 += d2d_error(&point_gaussian(frame, k), &cell.gaussian(), t_ij).error;
                acc.1 += 1;
            }
        },
        |a, b| (a.0 + b.0, a.1 + b.1),
    )
}

/// Gauss-Newton model of the matching cost around `(T_i, T_j)`:
/// `cost(ξ) ≈ cost + bᵀξ + ½ξᵀHξ` with `ξ = [ξ_i, ξ_j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchingCostLinearization {
    pub h_ii: Matrix6,
    pub h_ij: Matrix6,
    pub h_jj: Matrix6,
    pub b_i: Vector6,
    pub b_j: Vector6,
    pub cost: f64,
    pub inliers: usize,
}

impl MatchingCostLinearization {
    pub fn hessian(&self) -> SMatrix<f64, 12, 12> {
        let mut h = Matrix12::zeros();
        h.fixed_view_mut::<6, 6>(0, 0).copy_from(&self.h_ii);
        h.fixed_view_mut::<6, 6>(0, 6).copy_from(&self.h_ij);
        h.fixed_view_mut::<6, 6>(6, 0).copy_from(&self.h_ij.transpose());
        h.fixed_view_mut::<6, 6>(6, 6).copy_from(&self.h_jj);
        h
    }

    pub fn gradient(&self) -> SVector<f64, 12> {
        let mut g = Vector12::zeros();
        g.fixed_rows_mut::<6>(0).copy_from(&self.b_i);
        g.fixed_rows_mut::<6>(6).copy_from(&self.b_j);
        g
    }
}

/// Residual Jacobians `(∂d/∂ξ_i, ∂d/∂ξ_j)` for one matched point.
pub fn residual_jacobians(mean: &Vector3<f64>, t_ij: &Se3Pose) -> (SMatrix<f64, 3, 6>, SMatrix<f64, 3, 6>) {
    let r = t_ij.rotation_matrix();
    let p = t_ij.apply(mean);
    let mut ji = SMatrix::<f64, 3, 6>::zeros();
    ji.fixed_view_mut::<3, 3>(0, 0).copy_from(&(r * so3::hat(mean)));
    ji.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-r));
    let mut jj = SMatrix::<f64, 3, 6>::zeros();
    jj.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-so3::hat(&p)));
    jj.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    (ji, jj)
}

/// Point-to-voxel correspondences found at a particular `T_ij`.
#[derive(Clone, Debug)]
pub struct Association {
    pub t_ij: Se3Pose,
    /// Matched source point index and the voxel Gaussian it landed in.
    pub matches: Vec<(usize, Gaussian3)>,
}

impl Association {
    pub fn inliers(&self) -> usize {
        self.matches.len()
    }

    /// Whether `t_ij` is within the given rotation (rad) and translation (m)
    /// of the pose the correspondences were found at.
    pub fn is_valid_at(&self, t_ij: &Se3Pose, rot_tolerance: f64, trans_tolerance: f64) -> bool {
        let (angle, dist) = self.t_ij.distance(t_ij);
        angle <= rot_tolerance && dist <= trans_tolerance
    }
}

/// Looks up the voxel of every transformed source point.
pub fn associate(frame: &Frame, map: &GaussianVoxelMap, t_ij: &Se3Pose) -> Association {
    let matches = crate::par::fold_chunks(
        &frame.points,
        Vec::new,
        |acc: &mut Vec<(usize, Gaussian3)>, k, p| {
            if let Some(cell) = map.lookup(&t_ij.apply(p)) {
                acc.push((k, cell.gaussian()));
            }
        },
        |mut a, b| {
            a.extend(b);
            a
        },
    );
    Association { t_ij: *t_ij, matches }
}

/// Matching cost at `t_ij` with fixed correspondences.
pub fn associated_cost(frame: &Frame, assoc: &Association, t_ij: &Se3Pose) -> f64 {
    assert!(frame.is_empty() || frame.has_covariances());
    crate::par::fold_chunks(
        &assoc.matches,
        || 0.0,
        |acc, _, (k, voxel)| *acc += d2d_error(&point_gaussian(frame, *k), voxel, t_ij).error,
        |a, b| a + b,
    )
}

/// Gauss-Newton model at `(T_i, T_j)` with fixed correspondences.
pub fn linearize_associated(
    frame: &Frame,
    assoc: &Association,
    t_i: &Se3Pose,
    t_j: &Se3Pose,
) -> MatchingCostLinearization {
    linearize_weighted(frame, assoc, t_i, t_j, false)
}

/// Like [`linearize_associated`], but each point only contributes
/// information along its surface normal.
///
/// Regularized plane covariances leave a unit variance inside the plane,
/// which the full model turns into in-plane information that the geometry
/// does not support: sliding along a featureless wall looks constrained.
/// This variant keeps only the normal component of every weight, so
/// directions that no surface faces carry no information. Use it to judge
/// whether the geometry determines a pose, not to optimize.
pub fn linearize_associated_normal(
    frame: &Frame,
    assoc: &Association,
    t_i: &Se3Pose,
    t_j: &Se3Pose,
) -> MatchingCostLinearization {
    linearize_weighted(frame, assoc, t_i, t_j, true)
}

fn surface_normal(cov: &Matrix3<f64>) -> Vector3<f64> {
    let eig = cov.symmetric_eigen();
    let k = eig.eigenvalues.imin();
    eig.eigenvectors.column(k).into_owned()
}

fn linearize_weighted(
    frame: &Frame,
    assoc: &Association,
    t_i: &Se3Pose,
    t_j: &Se3Pose,
    normal_only: bool,
) -> MatchingCostLinearization {
    assert!(frame.is_empty() || frame.has_covariances());
    let t_ij = t_j.inverse().compose(t_i);
    let rot = t_ij.rotation_matrix();
    let (h, g, cost) = crate::par::fold_chunks(
        &assoc.matches,
        || (Matrix12::zeros(), Vector12::zeros(), 0.0),
        |acc, _, (k, voxel)| {
            let p = &frame.points[*k];
            let mut term = d2d_error(&point_gaussian(frame, *k), voxel, &t_ij);
            if normal_only {
                let n = rot * surface_normal(&frame.covs[*k]);
                term.weight = n * n.transpose() * n.dot(&(term.weight * n));
            }
            let (ji, jj) = residual_jacobians(p, &t_ij);
            let mut j = SMatrix::<f64, 3, 12>::zeros();
            j.fixed_view_mut::<3, 6>(0, 0).copy_from(&ji);
            j.fixed_view_mut::<3, 6>(0, 6).copy_from(&jj);
            let jt_w = j.transpose() * term.weight;
            acc.0 += 2.0 * jt_w * j;
            acc.1 += 2.0 * jt_w * term.residual;
            acc.2 += term.error;
        },
        |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2),
    );
    MatchingCostLinearization {
        h_ii: h.fixed_view::<6, 6>(0, 0).into_owned(),
        h_ij: h.fixed_view::<6, 6>(0, 6).into_owned(),
        h_jj: h.fixed_view::<6, 6>(6, 6).into_owned(),
        b_i: g.fixed_rows::<6>(0).into_owned(),
        b_j: g.fixed_rows::<6>(6).into_owned(),
        cost,
        inliers: assoc.inliers(),
    }
}

/// Linearization with fresh correspondences and without the inlier gate.
pub(crate) fn linearize_unchecked(
    frame: &Frame,
    map: &GaussianVoxelMap,
    t_i: &Se3Pose,
    t_j: &Se3Pose,
) -> MatchingCostLinearization {
    let assoc = associate(frame, map, &t_j.inverse().compose(t_i));
    linearize_associated(frame, &assoc, t_i, t_j)
}

/// Re-associates points at `(T_i, T_j)` and linearizes the matching cost.
/// Fewer than `min_inliers` matches yields `DegenerateConstraint`.
pub fn linearize_matching_cost(
    frame: &Frame,
    map: &GaussianVoxelMap,
    t_i: &Se3Pose,
    t_j: &Se3Pose,
    min_inliers: usize,
) -> Result<MatchingCostLinearization> {
    let lin = linearize_unchecked(frame, map, t_i, t_j);
    if lin.inliers < min_inliers {
        return Err(Error::DegenerateConstraint {
            inliers: lin.inliers,
            min: min_inliers,
        });
    }
    Ok(lin)
}

/// Outcome of [`register`].
#[derive(Clone, Debug)]
pub struct Registration {
    /// Estimated pose of the source frame in the target map's frame.
    pub t_ij: Se3Pose,
    pub cost: f64,
    pub iterations: usize,
    pub inliers: usize,
}

/// Aligns a frame to a voxel map from an initial guess of their relative
/// pose by minimizing the matching cost.
pub fn register(
    source: Arc<Frame>,
    target: Arc<GaussianVoxelMap>,
    initial: &Se3Pose,
    lm: &LmSettings,
) -> Result<Registration> {
    let key = Key::frame(0);
    let factor = MatchingCostFactor::unary(key, source, target, Se3Pose::identity());
    let mut graph = FactorGraph::new();
    graph.add_variable(key, Value::Pose(*initial))?;
    graph.add_factor(factor.clone())?;
    let result = optimize_lm(&graph, lm)?;
    let inliers = factor.inliers(&result.values)?;
    if inliers < 6 {
        return Err(Error::DegenerateConstraint { inliers, min: 6 });
    }
    Ok(Registration {
        t_ij: *result.values.pose(&key)?,
        cost: result.final_cost,
        iterations: result.iterations,
        inliers,
    })
}

/// Fraction of the frame's points whose transformed position falls into an
/// occupied voxel of `map`.
pub fn overlap_rate(frame: &Frame, map: &GaussianVoxelMap, t_ij: &Se3Pose) -> f64 {
    if frame.is_empty() {
        return 0.0;
    }
    let hits = crate::par::fold_chunks(
        &frame.points,
        || 0usize,
        |acc, _, p| {
            if map.contains(&t_ij.apply(p)) {
                *acc += 1;
            }
        },
        |a, b| a + b,
    );
    hits as f64 / frame.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Se3Pose {
        Se3Pose::from_parts(
            Vector3::from_fn(|_, _| rng.random_range(-rot..rot)),
            Vector3::from_fn(|_, _| rng.random_range(-trans..trans)),
        )
    }

    fn random_cov(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        a * a.transpose() + Matrix3::identity() * 0.01
    }

    /// Random points on a few planes, with plane covariances.
    fn structured_frame(rng: &mut ChaCha8Rng, n: usize) -> Frame {
        let mut pts = Vec::new();
        let mut covs = Vec::new();
        for k in 0..n {
            let u = rng.random_range(-3.0..3.0);
            let v = rng.random_range(-3.0..3.0);
            let (p, normal) = match k % 3 {
                0 => (Vector3::new(u, v, -1.5), Vector3::z()),
                1 => (Vector3::new(4.0, u, v), Vector3::x()),
                _ => (Vector3::new(u, 3.5, v), Vector3::y()),
            };
            pts.push(p);
            covs.push(crate::preprocess::plane_covariance(&normal, 1e-3));
        }
        Frame::with_covariances(0.0, pts, covs)
    }

    #[test]
    fn d2d_hand_example() {
        let p = Gaussian3::new(Vector3::new(1.0, 0.0, 0.0), Matrix3::identity());
        let q = Gaussian3::new(Vector3::new(1.1, 0.0, 0.0), Matrix3::identity());
        let t = d2d_error(&p, &q, &Se3Pose::identity());
        assert!((t.error - 0.005).abs() < 1e-15);
        assert!((t.weight - Matrix3::identity() * 0.5).norm() < 1e-15);
        let z = d2d_error(&p, &p, &Se3Pose::identity());
        assert_eq!(z.error, 0.0);
    }

    #[test]
    fn d2d_is_invariant_under_common_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let p = Gaussian3::new(
                Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
                random_cov(&mut rng),
            );
            let q = Gaussian3::new(
                Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
                random_cov(&mut rng),
            );
            let t = random_pose(&mut rng, 1.0, 2.0);
            let g = random_pose(&mut rng, 3.0, 5.0);
            let base = d2d_error(&p, &q, &t).error;
            // Move the source by g and the target by g as well: T' = g T g⁻¹.
            let moved = d2d_error(
                &p.transformed(&g),
                &q.transformed(&g),
                &g.compose(&t).compose(&g.inverse()),
            )
            .error;
            assert!((base - moved).abs() < 1e-9 * base.max(1.0));
        }
    }

    #[test]
    fn matching_cost_is_sum_of_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = structured_frame(&mut rng, 600);
        let m = GaussianVoxelMap::build(&structured_frame(&mut rng, 600), 0.5);
        let t = random_pose(&mut rng, 0.05, 0.1);
        let (cost, inliers) = matching_cost(&f, &m, &t);
        let mut sum = 0.0;
        let mut n = 0;
        for chunk in (0..f.len()).collect::<Vec<_>>().chunks(crate::par::CHUNK) {
            let mut part = 0.0;
            for &k in chunk {
                if let Some(c) = m.lookup(&t.apply(&f.points[k])) {
                    part += d2d_error(&Gaussian3::new(f.points[k], f.covs[k]), &c.gaussian(), &t).error;
                    n += 1;
                }
            }
            sum += part;
        }
        assert_eq!(cost, sum);
        assert_eq!(inliers, n);
    }

    #[test]
    fn self_match_and_disjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = structured_frame(&mut rng, 300);
        let m = GaussianVoxelMap::build(&f, 0.5);
        let (_, inliers) = matching_cost(&f, &m, &Se3Pose::identity());
        assert_eq!(inliers, f.len());
        assert_eq!(overlap_rate(&f, &m, &Se3Pose::identity()), 1.0);
        let far = Se3Pose::from_translation(Vector3::new(100.0, 0.0, 0.0));
        assert_eq!(matching_cost(&f, &m, &far), (0.0, 0));
        assert_eq!(overlap_rate(&f, &m, &far), 0.0);
    }

    #[test]
    fn overlap_counts_hits() {
        let covs = vec![Matrix3::identity(); 10];
        let pts: Vec<_> = (0..10).map(|i| Vector3::new(i as f64 + 0.5, 0.5, 0.5)).collect();
        let f = Frame::with_covariances(0.0, pts.clone(), covs.clone());
        let target = Frame::with_covariances(0.0, pts[..4].to_vec(), covs[..4].to_vec());
        let m = GaussianVoxelMap::build(&target, 1.0);
        assert_eq!(overlap_rate(&f, &m, &Se3Pose::identity()), 0.4);
    }

    #[test]
    fn overlap_grows_with_map_union() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = structured_frame(&mut rng, 400);
        let mut m = GaussianVoxelMap::build(&structured_frame(&mut rng, 50), 0.5);
        let t = random_pose(&mut rng, 0.1, 0.5);
        let before = overlap_rate(&f, &m, &t);
        m.absorb(&GaussianVoxelMap::build(&structured_frame(&mut rng, 200), 0.5));
        assert!(overlap_rate(&f, &m, &t) >= before);
    }

    #[test]
    fn stationary_point_when_each_voxel_holds_one_point() {
        let covs = vec![crate::preprocess::plane_covariance(&Vector3::z(), 1e-3); 30];
        let pts: Vec<_> = (0..30)
            .map(|i| {
                Vector3::new(
                    (i % 5) as f64 * 2.0 + 0.3,
                    (i / 5) as f64 * 2.0 + 0.7,
                    (i % 3) as f64 * 2.0 + 0.1,
                )
            })
            .collect();
        let f = Frame::with_covariances(0.0, pts, covs);
        let m = GaussianVoxelMap::build(&f, 1.0);
        let t = random_pose(&mut ChaCha8Rng::seed_from_u64(11), 1.0, 3.0);
        let lin = linearize_matching_cost(&f, &m, &t, &t, 10).unwrap();
        assert!(lin.gradient().norm() < 1e-8);
    }

    #[test]
    fn quadratic_model_predicts_cost_change() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = structured_frame(&mut rng, 800);
        let m = GaussianVoxelMap::build(&structured_frame(&mut rng, 3000), 0.5);
        let t_j = random_pose(&mut rng, 0.5, 1.0);
        let t_i = t_j.compose(&random_pose(&mut rng, 0.02, 0.05));
        let lin = linearize_matching_cost(&f, &m, &t_i, &t_j, 10).unwrap();
        // Evaluate with correspondences and weights frozen at the
        // linearization point, which is what the Gauss-Newton model describes.
        let t_ij = t_j.inverse().compose(&t_i);
        let frozen: Vec<(usize, Gaussian3, Matrix3<f64>)> = (0..f.len())
            .filter_map(|k| {
                let c = m.lookup(&t_ij.apply(&f.points[k]))?;
                let w = d2d_error(&Gaussian3::new(f.points[k], f.covs[k]), &c.gaussian(), &t_ij).weight;
                Some((k, c.gaussian(), w))
            })
            .collect();
        let frozen_cost = |ti: &Se3Pose, tj: &Se3Pose| {
            let tij = tj.inverse().compose(ti);
            frozen
                .iter()
                .map(|(k, g, w)| {
                    let d = g.mean - tij.apply(&f.points[*k]);
                    d.dot(&(w * d))
                })
                .sum::<f64>()
        };
        let c0 = frozen_cost(&t_i, &t_j);
        assert!((c0 - lin.cost).abs() < 1e-9 * c0);
        for _ in 0..20 {
            let xi = SVector::<f64, 12>::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize() * 1e-4;
            let xi_i: Vector6 = xi.fixed_rows::<6>(0).into_owned();
            let xi_j: Vector6 = xi.fixed_rows::<6>(6).into_owned();
            let actual = frozen_cost(&t_i.retract(&xi_i), &t_j.retract(&xi_j)) - c0;
            let predicted = lin.gradient().dot(&xi) + 0.5 * xi.dot(&(lin.hessian() * xi));
            assert!(
                (actual - predicted).abs() < 1e-3 * actual.abs().max(1e-12),
                "{actual} vs {predicted}"
            );
        }
    }

    #[test]
    fn residual_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let mean = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
            let t_i = random_pose(&mut rng, 2.0, 5.0);
            let t_j = random_pose(&mut rng, 2.0, 5.0);
            let t_ij = t_j.inverse().compose(&t_i);
            let (ji, jj) = residual_jacobians(&mean, &t_ij);
            let d = |ti: &Se3Pose, tj: &Se3Pose| -tj.inverse().compose(ti).apply(&mean);
            let h = 1e-6;
            for c in 0..6 {
                let mut e = Vector6::zeros();
                e[c] = h;
                let fi = (d(&t_i.retract(&e), &t_j) - d(&t_i.retract(&-e), &t_j)) / (2.0 * h);
                let fj = (d(&t_i, &t_j.retract(&e)) - d(&t_i, &t_j.retract(&-e))) / (2.0 * h);
                assert!((fi - ji.column(c)).norm() < 1e-5 * fi.norm().max(1.0));
                assert!((fj - jj.column(c)).norm() < 1e-5 * fj.norm().max(1.0));
            }
        }
    }

    #[test]
    fn hessian_is_psd_and_unary_block_too() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..10 {
            let f = structured_frame(&mut rng, 300);
            let m = GaussianVoxelMap::build(&structured_frame(&mut rng, 1000), 0.5);
            let t_i = random_pose(&mut rng, 0.05, 0.1);
            let lin = linearize_matching_cost(&f, &m, &t_i, &Se3Pose::identity(), 1).unwrap();
            let h = lin.hessian();
            let ev = h.symmetric_eigenvalues();
            assert!(ev.min() >= -1e-8 * h.norm());
            assert!(lin.h_ii.symmetric_eigenvalues().min() >= -1e-8 * h.norm());
        }
    }

    #[test]
    fn too_few_inliers_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let f = structured_frame(&mut rng, 100);
        let m = GaussianVoxelMap::build(&f, 0.5);
        let far = Se3Pose::from_translation(Vector3::new(50.0, 0.0, 0.0));
        assert!(matches!(
            linearize_matching_cost(&f, &m, &far, &Se3Pose::identity(), 10),
            Err(Error::DegenerateConstraint { inliers: 0, .. })
        ));
    }
}
