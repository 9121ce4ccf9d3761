//! Cross-variant properties of the momentum dynamics: the one-buffer and
//! two-representation forms trace identical trajectories, every variant
//! degenerates to the plain residual step under its documented parameter
//! limit, and tuned heavy-ball beats tuned plain descent on an
//! ill-conditioned quadratic.

use momoe_core::dynamics::{
    baseline_step, complex_momentum_step, heavy_ball_fixed, nag_step, robust_momentum_step,
    robust_params, sam_step, time_varying_step, two_form_step, LayerState, StepScale,
};
use momoe_core::tensor::Tensor;
use momoe_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Symmetric negative-definite linear field with eigenvalues in
/// `[-hi, -lo]`: a layer output that contracts toward the origin.
struct LinearField {
    matrix: Vec<f64>,
    dim: usize,
}

impl LinearField {
    fn random(dim: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> LinearField {
        let raw = nalgebra::DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
        let q = raw.qr().q();
        let eigs: Vec<f64> = (0..dim).map(|_| -rng.random_range(lo..hi)).collect();
        let lambda = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eigs));
        let m = &q * lambda * q.transpose();
        LinearField {
            matrix: m.as_slice().to_vec(), // column-major == row-major: symmetric
            dim,
        }
    }

    fn output(&self, x: &Tensor) -> Result<Tensor> {
        let m = Tensor::new(self.matrix.clone(), vec![self.dim, self.dim])?;
        m.matmul(x)
    }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.to_vec()
        .iter()
        .zip(b.to_vec().iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn momentum_form_equals_two_representation_form_over_100_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for instance in 0..10 {
        let dim = 6;
        let field = LinearField::random(dim, 0.1, 1.0, &mut rng);
        let x0: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let momentum = rng.random_range(0.1..0.9);
        let step = rng.random_range(0.3..1.2);

        let mut state = LayerState::new(Tensor::vector(x0.clone()).unwrap());
        let mut x = Tensor::vector(x0.clone()).unwrap();
        let mut x_prev = Tensor::vector(x0).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let out = field.output(&state.x).unwrap();
            state = heavy_ball_fixed(&out, &state, momentum, step).unwrap();

            let grad = field.output(&x).unwrap().neg().unwrap();
            let x_next = two_form_step(&grad, &x, &x_prev, momentum, step).unwrap();
            x_prev = x;
            x = x_next;

            worst = worst.max(max_abs_diff(&state.x, &x));
        }
        assert!(worst < 1e-10, "instance {instance}: divergence {worst}");
    }
}

#[test]
fn robust_momentum_matches_its_two_representation_form_over_50_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = robust_params(0.5, 1.0, 0.1).unwrap();
    for _ in 0..5 {
        let dim = 5;
        // Field scaled into the robust parameterization's design range.
        let field = LinearField::random(dim, 0.1, 1.0, &mut rng);
        let x0: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scale = 0.2;

        let mut state = LayerState::new(Tensor::vector(x0.clone()).unwrap());
        let mut x = Tensor::vector(x0.clone()).unwrap();
        let mut x_prev = Tensor::vector(x0).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            state = robust_momentum_step(
                |p| field.output(p)?.scale(scale),
                &state,
                &params,
            )
            .unwrap();

            // y = x + lookahead (x - x_prev); x' = x + step*out(y) + momentum (x - x_prev)
            let drift = x.sub(&x_prev).unwrap();
            let y = x.add(&drift.scale(params.lookahead).unwrap()).unwrap();
            let out_y = field.output(&y).unwrap().scale(scale).unwrap();
            let x_next = x
                .add(&out_y.scale(params.step_size).unwrap())
                .unwrap()
                .add(&drift.scale(params.momentum).unwrap())
                .unwrap();
            x_prev = x;
            x = x_next;

            worst = worst.max(max_abs_diff(&state.x, &x));
        }
        assert!(worst < 1e-10, "robust two-form divergence {worst}");
    }
}

#[test]
fn every_variant_degenerates_to_the_plain_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dim = 4;
    let field = LinearField::random(dim, 0.2, 0.8, &mut rng);
    let x0: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let state = LayerState::new(Tensor::vector(x0).unwrap());
    let out = field.output(&state.x).unwrap();
    let step_size = 0.7;
    let plain = baseline_step(&out, &state, &StepScale::Fixed(step_size)).unwrap();

    // Heavy-ball, momentum 0.
    let hb = heavy_ball_fixed(&out, &state, 0.0, step_size).unwrap();
    assert_eq!(hb.x.to_vec(), plain.x.to_vec());

    // Nesterov, momentum 0 (step multiplies inside the buffer).
    let nag = nag_step(|p| field.output(p), &state, 0.0, step_size, false).unwrap();
    assert!(max_abs_diff(&nag.x, &plain.x) < 1e-12);

    // Sharpness-aware, radius 0.
    let sam = sam_step(|p| field.output(p), &state, 0.0, step_size).unwrap();
    assert_eq!(sam.x.to_vec(), plain.x.to_vec());

    // Robust momentum at the rate -> 0 limit: lookahead and momentum vanish
    // and the step approaches condition_ratio / smoothness = 1/m.
    let tiny = robust_params(1e-9, 2.0, 1.0 / step_size).unwrap();
    let robust = robust_momentum_step(|p| field.output(p), &state, &tiny).unwrap();
    assert!(max_abs_diff(&robust.x, &plain.x) < 1e-6);

    // Complex momentum with zero imaginary part and zero real part.
    let complex = complex_momentum_step(&out, &state, 0.0, 0.0, step_size).unwrap();
    assert_eq!(complex.x.to_vec(), plain.x.to_vec());

    // Time-varying at layer 1: coefficient is exactly zero.
    let tv = time_varying_step(&out, &state, 1, step_size, None).unwrap();
    assert_eq!(tv.x.to_vec(), plain.x.to_vec());

    // Scheduled restart at a multiple of the period.
    let sr = time_varying_step(&out, &state, 3, step_size, Some(3)).unwrap();
    assert_eq!(sr.x.to_vec(), plain.x.to_vec());
}

/// Iterations for a dynamics rule to drive a diagonal quadratic's iterate
/// below `tol`, with the layer output as the negative gradient.
fn iterations_to_tol(
    spectrum: &[f64],
    x0: &[f64],
    tol: f64,
    cap: usize,
    mut advance: impl FnMut(&Tensor, &LayerState) -> Result<LayerState>,
) -> usize {
    let sigma = Tensor::vector(spectrum.to_vec()).unwrap();
    let mut state = LayerState::new(Tensor::vector(x0.to_vec()).unwrap());
    for it in 0..cap {
        if state.x.norm().unwrap().value() < tol {
            return it;
        }
        let out = state.x.mul(&sigma).unwrap().neg().unwrap();
        state = advance(&out, &state).unwrap();
    }
    cap
}

#[test]
fn tuned_heavy_ball_accelerates_past_tuned_plain_descent() {
    // Diagonal quadratic with condition ratio 100.
    let (low, high) = (0.01, 1.0);
    let dim = 16;
    let spectrum: Vec<f64> = (0..dim)
        .map(|i| low + (high - low) * i as f64 / (dim - 1) as f64)
        .collect();
    let x0 = vec![1.0; dim];

    let ratio: f64 = high / low;
    let root = ratio.sqrt();
    let hb_momentum = ((root - 1.0) / (root + 1.0)).powi(2);
    let hb_step = (2.0 / (high.sqrt() + low.sqrt())).powi(2);
    let gd_step = 2.0 / (high + low);

    let hb_iters = iterations_to_tol(&spectrum, &x0, 1e-6, 100_000, |out, state| {
        heavy_ball_fixed(out, state, hb_momentum, hb_step)
    });
    let gd_iters = iterations_to_tol(&spectrum, &x0, 1e-6, 100_000, |out, state| {
        baseline_step(out, state, &StepScale::Fixed(gd_step))
    });
    println!("acceleration: heavy-ball {hb_iters} iters vs plain {gd_iters} iters");
    assert!(hb_iters < gd_iters, "hb {hb_iters} !< gd {gd_iters}");
    assert!(gd_iters < 100_000, "plain descent never converged");
}
