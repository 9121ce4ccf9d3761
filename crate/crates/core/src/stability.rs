//! Stability analysis of the momentum recurrence.
//!
//! Linearizing the momentum update around a stationary point decouples into
//! scalar recurrences `x' = x - effective_step * x + momentum (x - x_prev)`,
//! one per Jacobian eigenvalue, where `effective_step` is the product of the
//! step size and that eigenvalue. Each recurrence is governed by the 2x2
//! companion matrix
//!
//! ```text
//! A = | 0         1                             |
//!     | -momentum (1 + momentum) - effective_step |
//! ```
//!
//! whose spectral radius decides convergence. The closed forms here are
//! verified against direct simulation by [`region_sweep`], and the stable
//! region is exactly `momentum in (-1, 1)` and `effective_step in
//! (0, 2 + 2 momentum)`.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::moe::SmoeLayer;
use crate::tensor::Tensor;

/// The 2x2 companion matrix of the scalar momentum recurrence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompanionMatrix {
    pub momentum: f64,
    /// Product of step size and Jacobian eigenvalue, one scalar coordinate.
    pub effective_step: f64,
}

impl CompanionMatrix {
    pub fn new(momentum: f64, effective_step: f64) -> CompanionMatrix {
        CompanionMatrix {
            momentum,
            effective_step,
        }
    }

    /// Row-major entries `[[0, 1], [-momentum, (1+momentum)-effective_step]]`.
    pub fn entries(&self) -> [[f64; 2]; 2] {
        [
            [0.0, 1.0],
            [-self.momentum, (1.0 + self.momentum) - self.effective_step],
        ]
    }

    pub fn trace(&self) -> f64 {
        (1.0 + self.momentum) - self.effective_step
    }

    pub fn determinant(&self) -> f64 {
        self.momentum
    }

    /// Closed-form eigenvalues
    /// `((1+m-s) +- sqrt((1+m-s)^2 - 4m)) / 2`, complex when the discriminant
    /// is negative.
    pub fn eigenvalues(&self) -> (Complex64, Complex64) {
        let half_trace = self.trace() / 2.0;
        let discriminant = self.trace() * self.trace() - 4.0 * self.determinant();
        if discriminant >= 0.0 {
            let r = discriminant.sqrt() / 2.0;
            (
                Complex64::new(half_trace + r, 0.0),
                Complex64::new(half_trace - r, 0.0),
            )
        } else {
            let i = (-discriminant).sqrt() / 2.0;
            (
                Complex64::new(half_trace, i),
                Complex64::new(half_trace, -i),
            )
        }
    }

    pub fn spectral_radius(&self) -> f64 {
        let (l1, l2) = self.eigenvalues();
        l1.norm().max(l2.norm())
    }
}

/// The analytic convergence region: `momentum in (-1,1)` and
/// `effective_step in (0, 2 + 2 momentum)`, strict at every boundary.
pub fn analytic_region(momentum: f64, effective_step: f64) -> bool {
    momentum > -1.0
        && momentum < 1.0
        && effective_step > 0.0
        && effective_step < 2.0 + 2.0 * momentum
}

/// Verdict for one `(momentum, effective_step)` grid point.
#[derive(Debug, Clone, Copy)]
pub struct StabilityVerdict {
    pub momentum: f64,
    pub effective_step: f64,
    pub eigenvalues: (Complex64, Complex64),
    pub spectral_radius: f64,
    pub analytic_stable: bool,
    pub empirical_stable: bool,
}

/// Simulation settings for the empirical verdict.
#[derive(Debug, Clone, Copy)]
pub struct SimulationConfig {
    pub steps: usize,
    /// A trajectory counts as stable when `|x_T| < |x_0| * decay_threshold`.
    pub decay_threshold: f64,
    /// Grid cells with spectral radius within this distance of 1 are
    /// excluded from agreement statistics; a finite simulation cannot decide
    /// them.
    pub boundary_guard: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            steps: 500,
            decay_threshold: 1e-3,
            boundary_guard: 1e-2,
        }
    }
}

/// Scalar trajectory of the recurrence
/// `x' = x - effective_step * x + momentum (x - x_prev)` from `x0`
/// (momentum-free start: `x_prev = x0`). Overflow is clamped and classified
/// unstable, not an error.
pub fn simulate_scalar(
    momentum: f64,
    effective_step: f64,
    steps: usize,
    x0: f64,
) -> Result<Vec<f64>> {
    if steps < 2 {
        return Err(Error::contract(format!(
            "simulation needs at least 2 steps, got {steps}"
        )));
    }
    let mut trajectory = Vec::with_capacity(steps + 1);
    trajectory.push(x0);
    let mut prev = x0;
    let mut cur = x0;
    for _ in 0..steps {
        let next = cur - effective_step * cur + momentum * (cur - prev);
        prev = cur;
        cur = next;
        if !cur.is_finite() || cur.abs() > 1e250 {
            // Blown up; freeze the remainder at an overflow sentinel.
            trajectory.push(f64::MAX);
            break;
        }
        trajectory.push(cur);
    }
    Ok(trajectory)
}

/// Empirical stability of one grid point under the configured horizon.
pub fn empirical_stable(
    momentum: f64,
    effective_step: f64,
    sim: &SimulationConfig,
    x0: f64,
) -> bool {
    let traj = simulate_scalar(momentum, effective_step, sim.steps, x0)
        .expect("steps >= 2 by construction");
    match traj.last() {
        Some(&last) if last.is_finite() && last != f64::MAX => {
            last.abs() < x0.abs() * sim.decay_threshold
        }
        _ => false,
    }
}

pub fn classify(momentum: f64, effective_step: f64, sim: &SimulationConfig) -> StabilityVerdict {
    let companion = CompanionMatrix::new(momentum, effective_step);
    let eigenvalues = companion.eigenvalues();
    StabilityVerdict {
        momentum,
        effective_step,
        eigenvalues,
        spectral_radius: companion.spectral_radius(),
        analytic_stable: analytic_region(momentum, effective_step),
        empirical_stable: empirical_stable(momentum, effective_step, sim, 1.0),
    }
}

/// Uniform grid described by start, step and count, indexed exactly so float
/// dust cannot shift row/column identity.
#[derive(Debug, Clone, Copy)]
pub struct GridAxis {
    pub start: f64,
    pub step: f64,
    pub count: usize,
}

impl GridAxis {
    pub fn at(&self, i: usize) -> f64 {
        self.start + self.step * i as f64
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.count).map(|i| self.at(i))
    }
}

/// Default sweep grid: momentum in [-1.5, 1.5] and effective step in
/// [-0.5, 4.5], both at 0.05 resolution (61 x 101 cells).
pub fn default_grid() -> (GridAxis, GridAxis) {
    (
        GridAxis {
            start: -1.5,
            step: 0.05,
            count: 61,
        },
        GridAxis {
            start: -0.5,
            step: 0.05,
            count: 101,
        },
    )
}

#[derive(Debug)]
pub struct SweepResult {
    pub verdicts: Vec<StabilityVerdict>,
    /// Cells outside the boundary guard band.
    pub judged_cells: usize,
    /// Among judged cells, how many have matching analytic and spectral
    /// verdicts, and matching analytic and empirical verdicts.
    pub analytic_spectral_agree: usize,
    pub analytic_empirical_agree: usize,
}

impl SweepResult {
    pub fn analytic_spectral_agreement(&self) -> f64 {
        self.analytic_spectral_agree as f64 / self.judged_cells as f64
    }

    pub fn analytic_empirical_agreement(&self) -> f64 {
        self.analytic_empirical_agree as f64 / self.judged_cells as f64
    }

    /// Total measure (cell count times step) of stable cells in one momentum
    /// row, by the analytic verdict.
    pub fn stable_measure_at(&self, momentum_axis: &GridAxis, row: usize, step: f64) -> f64 {
        let momentum = momentum_axis.at(row);
        let stable = self
            .verdicts
            .iter()
            .filter(|v| v.momentum == momentum && v.analytic_stable)
            .count();
        stable as f64 * step
    }
}

/// Sweep the grid, classifying every cell analytically, spectrally, and by
/// simulation. Cells are visited in deterministic row-major order.
pub fn region_sweep(
    momentum_axis: &GridAxis,
    step_axis: &GridAxis,
    sim: &SimulationConfig,
) -> SweepResult {
    let mut verdicts = Vec::with_capacity(momentum_axis.count * step_axis.count);
    let mut judged = 0usize;
    let mut spectral_agree = 0usize;
    let mut empirical_agree = 0usize;
    for momentum in momentum_axis.values() {
        for effective_step in step_axis.values() {
            let v = classify(momentum, effective_step, sim);
            let near_boundary = (v.spectral_radius - 1.0).abs() < sim.boundary_guard;
            if !near_boundary {
                judged += 1;
                if v.analytic_stable == (v.spectral_radius < 1.0) {
                    spectral_agree += 1;
                }
                if v.analytic_stable == v.empirical_stable {
                    empirical_agree += 1;
                }
            }
            verdicts.push(v);
        }
    }
    SweepResult {
        verdicts,
        judged_cells: judged,
        analytic_spectral_agree: spectral_agree,
        analytic_empirical_agree: empirical_agree,
    }
}

/// Least-squares slope of `ln ||state||` over the trajectory tail, reported
/// as a per-step decay factor. The fit runs on the norm of the two-step
/// state `(x_{t-1}, x_t)` so complex-pair oscillation does not produce
/// log-of-zero samples.
pub fn fitted_decay_rate(trajectory: &[f64], skip: usize) -> Option<f64> {
    if trajectory.len() < skip + 8 {
        return None;
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for t in skip..trajectory.len() - 1 {
        let state_norm = (trajectory[t].powi(2) + trajectory[t + 1].powi(2)).sqrt();
        if state_norm < 1e-290 || !state_norm.is_finite() {
            break;
        }
        xs.push(t as f64);
        ys.push(state_norm.ln());
    }
    if xs.len() < 8 {
        return None;
    }
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        cov += (x - mean_x) * (y - mean_y);
        var += (x - mean_x) * (x - mean_x);
    }
    if var == 0.0 {
        return None;
    }
    Some((cov / var).exp())
}

/// Maximum width accepted by [`jacobian_spectrum`].
pub const JACOBIAN_WIDTH_CAP: usize = 64;

#[derive(Debug, Clone)]
pub struct JacobianSpectrum {
    /// Eigenvalues of the *descent-field* Jacobian (the negated layer-output
    /// Jacobian), so positive real parts correspond to locally contracting
    /// directions under the plain residual update.
    pub eigenvalues: Vec<Complex64>,
    /// Raised when algebraic multiplicity numerically exceeds the geometric
    /// multiplicity (defective eigenvalue).
    pub defective: bool,
}

/// Dense Jacobian of the layer's descent field at `x`, assembled row by row
/// from reverse-mode sweeps with the routing selection held fixed, then
/// eigendecomposed.
pub fn jacobian_spectrum(layer: &SmoeLayer, x: &[f64]) -> Result<JacobianSpectrum> {
    let width = layer.width();
    if x.len() != width {
        return Err(Error::ShapeMismatch {
            op: "jacobian_spectrum",
            lhs: vec![x.len()],
            rhs: vec![width],
        });
    }
    if width > JACOBIAN_WIDTH_CAP {
        return Err(Error::SizeLimit(format!(
            "jacobian width {width} exceeds cap {JACOBIAN_WIDTH_CAP}"
        )));
    }
    let point = Tensor::param(x.to_vec(), vec![width])?;
    let output = layer.forward(&point)?.combined;
    let mut jac = nalgebra::DMatrix::<f64>::zeros(width, width);
    for i in 0..width {
        point.zero_grad();
        output.index(i)?.backward()?;
        let grad = point.grad().unwrap_or_else(|| vec![0.0; width]);
        for (j, g) in grad.iter().enumerate() {
            // Descent-field sign: negate the layer-output Jacobian.
            jac[(i, j)] = -g;
        }
    }
    let eigenvalues: Vec<Complex64> = jac.complex_eigenvalues().iter().copied().collect();
    let defective = detect_defective(&jac, &eigenvalues);
    Ok(JacobianSpectrum {
        eigenvalues,
        defective,
    })
}

/// Numerical defectiveness probe: for clusters of (near-)repeated
/// eigenvalues, compare the algebraic multiplicity against the rank drop of
/// `A - lambda I`.
fn detect_defective(a: &nalgebra::DMatrix<f64>, eigenvalues: &[Complex64]) -> bool {
    let n = a.nrows();
    let scale = eigenvalues
        .iter()
        .map(|l| l.norm())
        .fold(1.0f64, f64::max);
    let tol = 1e-6 * scale;
    let mut remaining: Vec<Complex64> = eigenvalues.to_vec();
    while let Some(lambda) = remaining.pop() {
        let mut algebraic = 1usize;
        remaining.retain(|other| {
            if (other - lambda).norm() < tol {
                algebraic += 1;
                false
            } else {
                true
            }
        });
        if algebraic < 2 {
            continue;
        }
        let mut shifted = nalgebra::DMatrix::<Complex64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                shifted[(i, j)] = Complex64::new(a[(i, j)], 0.0);
            }
            shifted[(i, i)] -= lambda;
        }
        let geometric = n - shifted.rank(tol);
        if geometric < algebraic {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn companion_trace_and_determinant_match_entries() {
        let c = CompanionMatrix::new(0.7, 1.3);
        let e = c.entries();
        assert_eq!(e[0], [0.0, 1.0]);
        assert!((e[1][0] + 0.7).abs() < 1e-15);
        assert!(((e[0][0] + e[1][1]) - c.trace()).abs() < 1e-15);
        let det = e[0][0] * e[1][1] - e[0][1] * e[1][0];
        assert!((det - c.determinant()).abs() < 1e-15);
    }

    #[test]
    fn eigenvalues_reference_points() {
        // Nilpotent case: momentum 0, effective step 1.
        let (l1, l2) = CompanionMatrix::new(0.0, 1.0).eigenvalues();
        assert_eq!((l1.norm(), l2.norm()), (0.0, 0.0));

        // Complex pair with modulus sqrt(momentum).
        let c = CompanionMatrix::new(0.25, 0.5);
        let (l1, l2) = c.eigenvalues();
        assert!(l1.im != 0.0);
        assert!((l1.norm() - 0.5).abs() < 1e-12);
        assert!((l2.norm() - 0.5).abs() < 1e-12);

        // Boundary: momentum 0, effective step 2 -> {0, -1}.
        let (l1, l2) = CompanionMatrix::new(0.0, 2.0).eigenvalues();
        let mut mods = [l1.re, l2.re];
        mods.sort_by(f64::total_cmp);
        assert!((mods[0] + 1.0).abs() < 1e-12);
        assert!(mods[1].abs() < 1e-12);
        assert!((CompanionMatrix::new(0.0, 2.0).spectral_radius() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn analytic_region_reference_points() {
        assert!(analytic_region(0.0, 1.0));
        assert!(analytic_region(0.7, 3.3));
        assert!(!analytic_region(0.7, 3.5));
        assert!(!analytic_region(1.2, 1.0));
        assert!(!analytic_region(0.0, 0.0));
        assert!(!analytic_region(0.0, 2.0));
        assert!(!analytic_region(-1.0, 0.5));
    }

    #[test]
    fn simulate_nilpotent_dies_in_one_step() {
        let t = simulate_scalar(0.0, 1.0, 5, 1.0).unwrap();
        assert_eq!(t[1], 0.0);
        assert_eq!(t[5], 0.0);
    }

    #[test]
    fn simulate_unstable_grows() {
        let t = simulate_scalar(0.0, 2.5, 100, 1.0).unwrap();
        assert!(t.last().unwrap().abs() > 1.0);
        assert!(!empirical_stable(0.0, 2.5, &SimulationConfig::default(), 1.0));
    }

    #[test]
    fn simulate_complex_case_decays_at_sqrt_momentum() {
        // momentum 0.25, step 0.5: complex pair, radius 0.5. The envelope
        // decays like 0.5^t within a constant factor.
        let t = simulate_scalar(0.25, 0.5, 60, 1.0).unwrap();
        let rate = fitted_decay_rate(&t, 5).unwrap();
        assert!((rate - 0.5).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn sweep_agreement_on_coarse_grid() {
        let momentum_axis = GridAxis {
            start: -1.2,
            step: 0.3,
            count: 9,
        };
        let step_axis = GridAxis {
            start: -0.4,
            step: 0.3,
            count: 17,
        };
        let sweep = region_sweep(&momentum_axis, &step_axis, &SimulationConfig::default());
        assert!(sweep.judged_cells > 0);
        assert_eq!(sweep.analytic_spectral_agreement(), 1.0);
        assert!(sweep.analytic_empirical_agreement() >= 0.99);
    }

    #[test]
    fn appendix_case_coverage() {
        let sim = SimulationConfig::default();
        // Real-root contradiction region (momentum above upper root): unstable.
        let big = classify(4.5, 1.0, &sim);
        assert!(!big.analytic_stable && big.spectral_radius >= 1.0);
        // Real roots, nonnegative trace, stable.
        let c1bi = classify(0.04, 0.5, &sim);
        assert!(c1bi.eigenvalues.0.im == 0.0);
        assert!(CompanionMatrix::new(0.04, 0.5).trace() >= 0.0);
        assert!(c1bi.analytic_stable && c1bi.spectral_radius < 1.0);
        // Real roots, negative trace, stable.
        let c1bii = classify(0.04, 2.0, &sim);
        assert!(c1bii.eigenvalues.0.im == 0.0);
        assert!(CompanionMatrix::new(0.04, 2.0).trace() <= 0.0);
        assert!(c1bii.analytic_stable && c1bii.spectral_radius < 1.0);
        // Complex pair with modulus sqrt(momentum).
        let c2 = classify(0.5, 1.5, &sim);
        assert!(c2.eigenvalues.0.im != 0.0);
        assert!((c2.spectral_radius - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn jacobian_of_linear_expert_is_negated_map() {
        use crate::moe::{Expert, Router};
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let width = 3;
        let router = Router::new(1, width, 1, &mut rng).unwrap();
        router.weight.set_data(&vec![0.0; width]).unwrap();
        // u(x) = M x with symmetric M.
        let m = vec![2.0, 0.5, 0.0, 0.5, 1.0, 0.3, 0.0, 0.3, 0.7];
        let layer = SmoeLayer {
            router,
            experts: vec![Expert::fixed_affine(m.clone(), vec![0.0; width]).unwrap()],
        };
        let spec = jacobian_spectrum(&layer, &[0.4, -0.2, 0.9]).unwrap();
        // Spectrum of -M: eigenvalues of M, negated.
        let m_mat = nalgebra::DMatrix::from_row_slice(width, width, &m);
        let mut expected: Vec<f64> = m_mat
            .complex_eigenvalues()
            .iter()
            .map(|l| -l.re)
            .collect();
        let mut got: Vec<f64> = spec.eigenvalues.iter().map(|l| l.re).collect();
        expected.sort_by(f64::total_cmp);
        got.sort_by(f64::total_cmp);
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        assert!(!spec.defective);
    }

    #[test]
    fn jacobian_rejects_oversized_layer() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let width = JACOBIAN_WIDTH_CAP + 1;
        let layer = SmoeLayer {
            router: crate::moe::Router::new(1, width, 1, &mut rng).unwrap(),
            experts: vec![crate::moe::Expert::linear(width, &mut rng).unwrap()],
        };
        let x = vec![0.0; width];
        assert!(matches!(
            jacobian_spectrum(&layer, &x),
            Err(Error::SizeLimit(_))
        ));
    }

    #[test]
    fn defective_matrix_is_flagged() {
        // Shift matrix [[0,1],[0,0]]: double eigenvalue 0, one eigenvector.
        let a = nalgebra::DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let eig: Vec<Complex64> = a.complex_eigenvalues().iter().copied().collect();
        assert!(detect_defective(&a, &eig));
        let id = nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let eig_id: Vec<Complex64> = id.complex_eigenvalues().iter().copied().collect();
        assert!(!detect_defective(&id, &eig_id));
    }
}
