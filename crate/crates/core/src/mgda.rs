//! Multi-objective descent machinery: Pareto-stationarity tests and the
//! minimum-norm common descent direction over the simplex.
//!
//! The reference objectives are quadratics `F_i(x) = 0.5 (x-c_i)' H_i (x-c_i)`
//! with symmetric positive-definite `H_i`, chosen because their gradients and
//! Pareto sets are exactly computable. The min-norm point in the convex hull
//! of a vector set is solved by Frank-Wolfe with the two-point analytic line
//! search, then sharpened by an exact solve on the active support; an
//! exhaustive simplex-grid solver is kept alongside as the validation oracle.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::MoeStack;
use crate::tensor::Tensor;

/// Gradient norms below this are treated as vanished (the objective is
/// individually stationary and cannot be normalized).
pub const ZERO_GRADIENT_TOL: f64 = 1e-12;

/// A set of quadratic objectives with SPD curvature.
#[derive(Debug, Clone)]
pub struct ObjectiveSet {
    dim: usize,
    /// Row-major `dim x dim` matrices.
    hessians: Vec<Vec<f64>>,
    centers: Vec<Vec<f64>>,
}

impl ObjectiveSet {
    pub fn new(hessians: Vec<Vec<f64>>, centers: Vec<Vec<f64>>) -> Result<ObjectiveSet> {
        if hessians.len() != centers.len() || hessians.is_empty() {
            return Err(Error::contract(
                "objective set needs matching, nonempty hessians and centers",
            ));
        }
        let dim = centers[0].len();
        for (h, c) in hessians.iter().zip(centers.iter()) {
            if c.len() != dim || h.len() != dim * dim {
                return Err(Error::contract("inconsistent objective dimensions"));
            }
            for i in 0..dim {
                for j in (i + 1)..dim {
                    if (h[i * dim + j] - h[j * dim + i]).abs() > 1e-12 {
                        return Err(Error::contract(format!(
                            "curvature matrix not symmetric at ({i},{j})"
                        )));
                    }
                }
            }
            let m = nalgebra::DMatrix::from_row_slice(dim, dim, h);
            if nalgebra::Cholesky::new(m).is_none() {
                return Err(Error::contract(
                    "curvature matrix is not positive definite",
                ));
            }
        }
        Ok(ObjectiveSet {
            dim,
            hessians,
            centers,
        })
    }

    /// Random SPD objectives with eigenvalues drawn uniformly from
    /// `[min_curvature, max_curvature]` and centers in the unit cube.
    pub fn random<R: Rng>(
        objectives: usize,
        dim: usize,
        min_curvature: f64,
        max_curvature: f64,
        rng: &mut R,
    ) -> Result<ObjectiveSet> {
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let mut hessians = Vec::with_capacity(objectives);
        let mut centers = Vec::with_capacity(objectives);
        for _ in 0..objectives {
            let raw = nalgebra::DMatrix::from_fn(dim, dim, |_, _| normal.sample(rng));
            let q = raw.qr().q();
            let eigs: Vec<f64> = (0..dim)
                .map(|_| rng.random_range(min_curvature..=max_curvature))
                .collect();
            let lambda = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eigs));
            let h = &q * lambda * q.transpose();
            // Symmetrize away round-off before validation.
            let mut flat = vec![0.0; dim * dim];
            for i in 0..dim {
                for j in 0..dim {
                    flat[i * dim + j] = (h[(i, j)] + h[(j, i)]) / 2.0;
                }
            }
            hessians.push(flat);
            centers.push((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        }
        ObjectiveSet::new(hessians, centers)
    }

    pub fn count(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn center(&self, i: usize) -> &[f64] {
        &self.centers[i]
    }

    pub fn hessian(&self, i: usize) -> &[f64] {
        &self.hessians[i]
    }

    pub fn value(&self, i: usize, x: &[f64]) -> f64 {
        let d: Vec<f64> = x
            .iter()
            .zip(self.centers[i].iter())
            .map(|(a, b)| a - b)
            .collect();
        let hd = self.apply_hessian(i, &d);
        0.5 * d.iter().zip(hd.iter()).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Exact gradient `H_i (x - c_i)`.
    pub fn gradient(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let d: Vec<f64> = x
            .iter()
            .zip(self.centers[i].iter())
            .map(|(a, b)| a - b)
            .collect();
        self.apply_hessian(i, &d)
    }

    pub fn gradients(&self, x: &[f64]) -> Vec<Vec<f64>> {
        (0..self.count()).map(|i| self.gradient(i, x)).collect()
    }

    fn apply_hessian(&self, i: usize, d: &[f64]) -> Vec<f64> {
        let h = &self.hessians[i];
        let n = self.dim;
        (0..n)
            .map(|r| h[r * n..(r + 1) * n].iter().zip(d).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Raw and normalized local gradients at a point. Objectives whose gradient
/// norm falls below [`ZERO_GRADIENT_TOL`] are flagged (normalization
/// undefined) rather than failed.
#[derive(Debug, Clone)]
pub struct LocalGradients {
    pub raw: Vec<Vec<f64>>,
    pub normalized: Vec<Option<Vec<f64>>>,
}

pub fn local_gradients(objectives: &ObjectiveSet, x: &[f64]) -> LocalGradients {
    let raw = objectives.gradients(x);
    let normalized = raw
        .iter()
        .map(|g| {
            let norm = l2(g);
            if norm > ZERO_GRADIENT_TOL {
                Some(g.iter().map(|v| v / norm).collect())
            } else {
                None
            }
        })
        .collect();
    LocalGradients { raw, normalized }
}

/// Nonnegative weights summing to one.
#[derive(Debug, Clone)]
pub struct SimplexWeights(Vec<f64>);

impl SimplexWeights {
    pub fn new(mut weights: Vec<f64>) -> Result<SimplexWeights> {
        for w in weights.iter_mut() {
            if *w < 0.0 {
                if *w < -1e-9 {
                    return Err(Error::contract(format!("negative simplex weight {w}")));
                }
                *w = 0.0;
            }
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || sum == 0.0 {
            return Err(Error::contract(format!("simplex weights sum to {sum}")));
        }
        for w in weights.iter_mut() {
            *w /= sum;
        }
        Ok(SimplexWeights(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Output of the min-norm solver.
#[derive(Debug, Clone)]
pub struct MinNormSolution {
    pub weights: SimplexWeights,
    /// `v* = sum_i alpha_i v_i`.
    pub point: Vec<f64>,
    pub norm: f64,
    /// Final duality gap; a residual report when not converged.
    pub gap: f64,
    pub converged: bool,
    pub iterations: usize,
}

const FRANK_WOLFE_MAX_ITERS: usize = 10_000;
const FRANK_WOLFE_GAP_TOL: f64 = 1e-10;

/// Minimum-norm point in the convex hull of `vectors`.
pub fn min_norm_point(vectors: &[Vec<f64>]) -> Result<MinNormSolution> {
    let e = vectors.len();
    if e == 0 {
        return Err(Error::contract("min_norm_point over an empty set"));
    }
    let n = vectors[0].len();
    if vectors.iter().any(|v| v.len() != n) {
        return Err(Error::contract("vectors of mixed dimension"));
    }
    if e == 1 {
        let point = vectors[0].clone();
        let norm = l2(&point);
        return Ok(MinNormSolution {
            weights: SimplexWeights::new(vec![1.0])?,
            point,
            norm,
            gap: 0.0,
            converged: true,
            iterations: 0,
        });
    }

    let gram = gram_matrix(vectors);
    let mut alpha = vec![1.0 / e as f64; e];
    let mut iterations = 0;
    let mut converged = false;
    for it in 0..FRANK_WOLFE_MAX_ITERS {
        iterations = it + 1;
        let q = mat_apply(&gram, &alpha);
        let norm2: f64 = alpha.iter().zip(q.iter()).map(|(a, b)| a * b).sum();
        let (j, qj) = argmin(&q);
        let gap = 2.0 * (norm2 - qj);
        if gap <= FRANK_WOLFE_GAP_TOL {
            converged = true;
            break;
        }
        // Analytic line search between the current point and vertex j.
        let denom = norm2 - 2.0 * qj + gram[j][j];
        let t = if denom <= 0.0 {
            1.0
        } else {
            ((norm2 - qj) / denom).clamp(0.0, 1.0)
        };
        for (i, a) in alpha.iter_mut().enumerate() {
            *a *= 1.0 - t;
            if i == j {
                *a += t;
            }
        }
    }

    // Sharpen: exact equality-constrained solve on the active support, with
    // minor cycles dropping negative coordinates, then global optimality
    // check that can grow the support.
    alpha = polish_support(&gram, alpha);
    let q = mat_apply(&gram, &alpha);
    let norm2: f64 = alpha.iter().zip(q.iter()).map(|(a, b)| a * b).sum();
    let (_, qj) = argmin(&q);
    let gap = (2.0 * (norm2 - qj)).max(0.0);
    if gap <= FRANK_WOLFE_GAP_TOL {
        converged = true;
    }

    let sum: f64 = alpha.iter().sum();
    for a in alpha.iter_mut() {
        *a /= sum;
    }
    let point = combine(vectors, &alpha);
    let norm = l2(&point);
    Ok(MinNormSolution {
        weights: SimplexWeights::new(alpha)?,
        point,
        norm,
        gap,
        converged,
        iterations,
    })
}

/// Exact min-norm solve restricted to the support of `alpha`, with support
/// shrink/grow cycles. Returns a feasible iterate at least as good as the
/// input.
fn polish_support(gram: &[Vec<f64>], alpha: Vec<f64>) -> Vec<f64> {
    let e = alpha.len();
    let norm2_of = |a: &[f64]| -> f64 {
        let q = mat_apply(gram, a);
        a.iter().zip(q.iter()).map(|(x, y)| x * y).sum()
    };
    let mut best = alpha.clone();
    let mut best_norm2 = norm2_of(&best);
    let mut support: Vec<usize> = (0..e).filter(|&i| alpha[i] > 1e-12).collect();
    if support.is_empty() {
        return best;
    }
    for _ in 0..2 * e + 2 {
        let Some(sol) = solve_on_support(gram, &support) else {
            break;
        };
        if let Some((worst, _)) = sol
            .iter()
            .enumerate()
            .filter(|(_, v)| **v < -1e-12)
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        {
            // Infeasible: drop the most negative coordinate and retry.
            if support.len() <= 1 {
                break;
            }
            support.remove(worst);
            continue;
        }
        let mut candidate = vec![0.0; e];
        for (slot, &idx) in support.iter().enumerate() {
            candidate[idx] = sol[slot].max(0.0);
        }
        let candidate_norm2 = norm2_of(&candidate);
        if candidate_norm2 <= best_norm2 + 1e-15 {
            best = candidate;
            best_norm2 = candidate_norm2;
        }
        // Global optimality: grow the support if some vertex violates it.
        let q = mat_apply(gram, &best);
        let (j, qj) = argmin(&q);
        if qj >= best_norm2 - FRANK_WOLFE_GAP_TOL / 2.0 {
            break;
        }
        if support.contains(&j) {
            break;
        }
        support.push(j);
        support.sort_unstable();
    }
    best
}

/// Solve `min a' G_S a` subject to `sum a = 1` on the given support via the
/// KKT system. `None` when the system is numerically singular.
fn solve_on_support(gram: &[Vec<f64>], support: &[usize]) -> Option<Vec<f64>> {
    let s = support.len();
    let n = s + 1;
    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    for (r, &i) in support.iter().enumerate() {
        for (c, &j) in support.iter().enumerate() {
            a[r][c] = 2.0 * gram[i][j];
        }
        a[r][s] = 1.0;
        a[s][r] = 1.0;
    }
    b[s] = 1.0;
    solve_dense(a, b).map(|sol| sol[..s].to_vec())
}

/// Gaussian elimination with partial pivoting for small dense systems.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a
        .iter()
        .flat_map(|row| row.iter().map(|v| v.abs()))
        .fold(1.0f64, f64::max);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r1, &r2| a[r1][col].abs().partial_cmp(&a[r2][col].abs()).unwrap())?;
        if a[pivot_row][col].abs() < 1e-12 * scale {
            return None;
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for r in (col + 1)..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut acc = b[r];
        for c in (r + 1)..n {
            acc -= a[r][c] * x[c];
        }
        x[r] = acc / a[r][r];
    }
    Some(x)
}

/// Exhaustive simplex-grid reference solver: weights are enumerated with
/// denominator `resolution`. Validation oracle for [`min_norm_point`];
/// exponential in the number of vectors, intended for tiny sets.
pub fn brute_force_min_norm(vectors: &[Vec<f64>], resolution: usize) -> (Vec<f64>, f64) {
    let e = vectors.len();
    assert!(e >= 1 && resolution >= 1);
    let n = vectors[0].len();
    let mut counts = vec![0usize; e];
    let mut best = (vec![0usize; e], f64::INFINITY);
    search_simplex(
        vectors,
        resolution,
        0,
        resolution,
        &vec![0.0; n],
        &mut counts,
        &mut best,
    );
    let weights: Vec<f64> = best
        .0
        .iter()
        .map(|&c| c as f64 / resolution as f64)
        .collect();
    (weights, best.1.sqrt())
}

fn search_simplex(
    vectors: &[Vec<f64>],
    resolution: usize,
    level: usize,
    remaining: usize,
    partial: &[f64],
    counts: &mut Vec<usize>,
    best: &mut (Vec<usize>, f64),
) {
    if level == vectors.len() - 1 {
        let a = remaining as f64 / resolution as f64;
        let mut norm2 = 0.0;
        for (p, v) in partial.iter().zip(vectors[level].iter()) {
            let w = p + a * v;
            norm2 += w * w;
        }
        if norm2 < best.1 {
            counts[level] = remaining;
            best.0.copy_from_slice(counts);
            best.1 = norm2;
        }
        return;
    }
    let mut next = vec![0.0; partial.len()];
    for c in 0..=remaining {
        let a = c as f64 / resolution as f64;
        for (nx, (p, v)) in next
            .iter_mut()
            .zip(partial.iter().zip(vectors[level].iter()))
        {
            *nx = p + a * v;
        }
        counts[level] = c;
        search_simplex(
            vectors,
            resolution,
            level + 1,
            remaining - c,
            &next,
            counts,
            best,
        );
    }
}

/// First-order optimality of the min-norm problem: every vertex satisfies
/// `<v*, v_i> >= |v*|^2 - slack`. This is also the common-descent property of
/// the direction.
pub fn satisfies_common_descent(solution: &MinNormSolution, vectors: &[Vec<f64>], slack: f64) -> bool {
    let norm2 = solution.norm * solution.norm;
    vectors
        .iter()
        .all(|v| dot(&solution.point, v) >= norm2 - slack)
}

/// A point is Pareto-stationary when some convex combination of the raw
/// gradients vanishes.
pub fn is_pareto_stationary(objectives: &ObjectiveSet, x: &[f64], tol: f64) -> Result<bool> {
    if tol <= 0.0 {
        return Err(Error::contract("tolerance must be positive"));
    }
    let grads = objectives.gradients(x);
    let solution = min_norm_point(&grads)?;
    Ok(solution.norm < tol)
}

/// One multi-gradient descent step along the min-norm direction over the
/// *normalized* gradients.
#[derive(Debug, Clone)]
pub struct MgdaStep {
    pub x_next: Vec<f64>,
    /// Weights over the objectives that entered the hull.
    pub weights: Vec<f64>,
    pub direction: Vec<f64>,
    /// Objectives excluded because their gradient vanished.
    pub excluded: Vec<usize>,
    pub direction_norm: f64,
}

pub fn mgda_step(objectives: &ObjectiveSet, x: &[f64], step_size: f64) -> Result<MgdaStep> {
    mgda_step_impl(objectives, x, step_size, true)
}

/// Variant descending along the min-norm point of the *raw* gradient hull.
/// This is the exact continuous analog of a gradient-field layer combining
/// expert outputs with the oracle weights.
pub fn mgda_step_raw(objectives: &ObjectiveSet, x: &[f64], step_size: f64) -> Result<MgdaStep> {
    mgda_step_impl(objectives, x, step_size, false)
}

fn mgda_step_impl(
    objectives: &ObjectiveSet,
    x: &[f64],
    step_size: f64,
    normalize: bool,
) -> Result<MgdaStep> {
    let grads = local_gradients(objectives, x);
    let mut hull: Vec<Vec<f64>> = Vec::new();
    let mut hull_source: Vec<usize> = Vec::new();
    let mut excluded = Vec::new();
    for (i, raw) in grads.raw.iter().enumerate() {
        let vector = if normalize {
            match &grads.normalized[i] {
                Some(v) => v.clone(),
                None => {
                    excluded.push(i);
                    continue;
                }
            }
        } else {
            if l2(raw) <= ZERO_GRADIENT_TOL {
                excluded.push(i);
                continue;
            }
            raw.clone()
        };
        hull.push(vector);
        hull_source.push(i);
    }
    if hull.is_empty() {
        // Every objective is individually stationary; nothing to descend.
        return Ok(MgdaStep {
            x_next: x.to_vec(),
            weights: vec![0.0; objectives.count()],
            direction: vec![0.0; x.len()],
            excluded,
            direction_norm: 0.0,
        });
    }
    let solution = min_norm_point(&hull)?;
    let mut weights = vec![0.0; objectives.count()];
    for (slot, &obj) in hull_source.iter().enumerate() {
        weights[obj] = solution.weights.as_slice()[slot];
    }
    let x_next: Vec<f64> = x
        .iter()
        .zip(solution.point.iter())
        .map(|(xv, dv)| xv - step_size * dv)
        .collect();
    Ok(MgdaStep {
        x_next,
        weights,
        direction: solution.point.clone(),
        excluded,
        direction_norm: solution.norm,
    })
}

/// Per-layer mean output norms over a batch: the raw material for the
/// descent-dynamics reading of a trained stack. Purely descriptive.
#[derive(Debug, Clone)]
pub struct AnalogyProbe {
    pub per_layer_mean_norm: Vec<f64>,
    /// Fraction of adjacent layer pairs with decreasing mean norm.
    pub decreasing_fraction: f64,
}

pub fn analogy_probe(stack: &MoeStack, batch: &[Vec<f64>]) -> Result<AnalogyProbe> {
    if batch.is_empty() {
        return Err(Error::DegenerateInput("analogy probe over empty batch".into()));
    }
    let mut sums = vec![0.0; stack.depth()];
    for x in batch {
        let input = Tensor::vector(x.clone())?;
        let (_, trace) = stack.forward(&input)?;
        for (s, n) in sums.iter_mut().zip(trace.output_norms.iter()) {
            *s += n;
        }
    }
    let per_layer_mean_norm: Vec<f64> =
        sums.into_iter().map(|s| s / batch.len() as f64).collect();
    let pairs = per_layer_mean_norm.len().saturating_sub(1);
    let decreasing = per_layer_mean_norm
        .windows(2)
        .filter(|w| w[1] < w[0])
        .count();
    Ok(AnalogyProbe {
        decreasing_fraction: if pairs > 0 {
            decreasing as f64 / pairs as f64
        } else {
            0.0
        },
        per_layer_mean_norm,
    })
}

fn combine(vectors: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let n = vectors[0].len();
    let mut out = vec![0.0; n];
    for (v, &w) in vectors.iter().zip(weights.iter()) {
        if w == 0.0 {
            continue;
        }
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += w * x;
        }
    }
    out
}

fn gram_matrix(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let e = vectors.len();
    let mut g = vec![vec![0.0; e]; e];
    for i in 0..e {
        for j in i..e {
            let d = dot(&vectors[i], &vectors[j]);
            g[i][j] = d;
            g[j][i] = d;
        }
    }
    g
}

fn mat_apply(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn argmin(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < best.1 {
            best = (i, v);
        }
    }
    best
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn l2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity(dim: usize) -> Vec<f64> {
        let mut h = vec![0.0; dim * dim];
        for i in 0..dim {
            h[i * dim + i] = 1.0;
        }
        h
    }

    #[test]
    fn gradient_at_center_vanishes() {
        let obj = ObjectiveSet::new(vec![identity(2)], vec![vec![0.3, -0.7]]).unwrap();
        let g = obj.gradient(0, &[0.3, -0.7]);
        assert!(l2(&g) < 1e-15);
    }

    #[test]
    fn unit_normalization() {
        let obj = ObjectiveSet::new(vec![identity(2)], vec![vec![0.0, 0.0]]).unwrap();
        let lg = local_gradients(&obj, &[3.0, 4.0]);
        assert_eq!(lg.raw[0], vec![3.0, 4.0]);
        let n = lg.normalized[0].as_ref().unwrap();
        assert!((n[0] - 0.6).abs() < 1e-15 && (n[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_flagged_not_failed() {
        let obj = ObjectiveSet::new(
            vec![identity(2), identity(2)],
            vec![vec![0.0, 0.0], vec![1.0, 0.0]],
        )
        .unwrap();
        let lg = local_gradients(&obj, &[0.0, 0.0]);
        assert!(lg.normalized[0].is_none());
        assert!(lg.normalized[1].is_some());
    }

    #[test]
    fn quadratic_gradients_match_autodiff() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let obj = ObjectiveSet::random(3, 4, 0.2, 2.0, &mut rng).unwrap();
        let x = vec![0.4, -0.9, 0.2, 0.6];
        for i in 0..obj.count() {
            // Build 0.5 (x-c)' H (x-c) with tensor ops and differentiate.
            let xt = Tensor::param(x.clone(), vec![4]).unwrap();
            let c = Tensor::vector(obj.center(i).to_vec()).unwrap();
            let h = Tensor::new(obj.hessian(i).to_vec(), vec![4, 4]).unwrap();
            let d = xt.sub(&c).unwrap();
            let hd = h.matmul(&d).unwrap();
            let val = d.mul(&hd).unwrap().sum().unwrap().scale(0.5).unwrap();
            val.backward().unwrap();
            let got = xt.grad().unwrap();
            let expected = obj.gradient(i, &x);
            for (a, b) in got.iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn min_norm_single_vector() {
        let sol = min_norm_point(&[vec![2.0, -1.0]]).unwrap();
        assert_eq!(sol.weights.as_slice(), &[1.0]);
        assert_eq!(sol.point, vec![2.0, -1.0]);
    }

    #[test]
    fn min_norm_orthogonal_pair() {
        let sol = min_norm_point(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((sol.weights.as_slice()[0] - 0.5).abs() < 1e-9);
        assert!((sol.norm - 1.0 / 2.0_f64.sqrt()).abs() < 1e-9);
        // Brute-force agreement at fine resolution.
        let (_, bf_norm) = brute_force_min_norm(&[vec![1.0, 0.0], vec![0.0, 1.0]], 10_000);
        assert!((sol.norm - bf_norm).abs() < 1e-6);
    }

    #[test]
    fn min_norm_opposing_pair_is_zero() {
        let sol = min_norm_point(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert!(sol.norm < 1e-10);
        assert!((sol.weights.as_slice()[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn min_norm_matches_segment_projection_for_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let v1: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let v2: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let sol = min_norm_point(&[v1.clone(), v2.clone()]).unwrap();
            // Closed-form projection of the origin onto segment [v1, v2].
            let diff: Vec<f64> = v1.iter().zip(v2.iter()).map(|(a, b)| a - b).collect();
            let denom = dot(&diff, &diff);
            let t = if denom == 0.0 {
                0.0
            } else {
                (dot(&v1, &diff) / denom).clamp(0.0, 1.0)
            };
            let proj: Vec<f64> = v1
                .iter()
                .zip(v2.iter())
                .map(|(a, b)| (1.0 - t) * a + t * b)
                .collect();
            assert!(
                (sol.norm - l2(&proj)).abs() < 1e-8,
                "{} vs {}",
                sol.norm,
                l2(&proj)
            );
        }
    }

    #[test]
    fn min_norm_satisfies_first_order_optimality() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for e in 2..=6 {
            let vectors: Vec<Vec<f64>> = (0..e)
                .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let sol = min_norm_point(&vectors).unwrap();
            assert!(sol.converged, "E={e} gap={}", sol.gap);
            assert!(satisfies_common_descent(&sol, &vectors, 1e-9));
        }
    }

    #[test]
    fn pareto_stationarity_on_the_segment() {
        let obj = ObjectiveSet::new(
            vec![identity(2), identity(2)],
            vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
        )
        .unwrap();
        for s in [-0.9, -0.3, 0.0, 0.4, 0.9] {
            assert!(is_pareto_stationary(&obj, &[s, 0.0], 1e-8).unwrap());
        }
        assert!(!is_pareto_stationary(&obj, &[0.0, 1.0], 1e-8).unwrap());
        assert!(!is_pareto_stationary(&obj, &[3.0, 0.0], 1e-8).unwrap());
        // Single objective at its minimizer.
        let single = ObjectiveSet::new(vec![identity(2)], vec![vec![0.5, 0.5]]).unwrap();
        assert!(is_pareto_stationary(&single, &[0.5, 0.5], 1e-8).unwrap());
    }

    #[test]
    fn mgda_converges_to_pareto_stationary_point() {
        let obj = ObjectiveSet::new(
            vec![identity(2), identity(2)],
            vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
        )
        .unwrap();
        let mut x = vec![1.7, 2.3];
        let mut stationary = false;
        for _ in 0..10_000 {
            let step = mgda_step(&obj, &x, 1e-2).unwrap();
            x = step.x_next;
            if step.direction_norm < 1e-6 {
                stationary = true;
                break;
            }
        }
        assert!(stationary, "did not reach stationarity, x={x:?}");
        assert!(x[1].abs() < 1e-3);
    }

    #[test]
    fn mgda_objectives_non_increasing_for_small_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let obj = ObjectiveSet::random(3, 4, 0.3, 1.5, &mut rng).unwrap();
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let step = mgda_step(&obj, &x, 1e-3).unwrap();
            if step.direction_norm < 1e-9 {
                continue;
            }
            for i in 0..obj.count() {
                let before = obj.value(i, &x);
                let after = obj.value(i, &step.x_next);
                assert!(
                    after <= before + 1e-12,
                    "objective {i} increased: {before} -> {after}"
                );
            }
        }
    }

    #[test]
    fn mgda_single_objective_is_normalized_gradient_descent() {
        let obj = ObjectiveSet::new(vec![identity(2)], vec![vec![0.0, 0.0]]).unwrap();
        let x = vec![3.0, 4.0];
        let step = mgda_step(&obj, &x, 0.5).unwrap();
        // Unit direction (0.6, 0.8), step 0.5.
        assert!((step.x_next[0] - (3.0 - 0.3)).abs() < 1e-12);
        assert!((step.x_next[1] - (4.0 - 0.4)).abs() < 1e-12);
    }

    #[test]
    fn mgda_excludes_vanished_gradients() {
        let obj = ObjectiveSet::new(
            vec![identity(2), identity(2)],
            vec![vec![0.0, 0.0], vec![1.0, 1.0]],
        )
        .unwrap();
        let step = mgda_step(&obj, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(step.excluded, vec![0]);
        assert!(step.direction_norm > 0.0);
    }
}
