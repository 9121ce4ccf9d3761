//! Synthetic multi-objective task: each expert is the (negated) gradient
//! field of one quadratic objective, so a layer stack literally performs
//! iterations of multi-objective descent on known objectives and every claim
//! about the dynamics is checkable against the exact oracle.

use momoe_core::dynamics::DynamicsConfig;
use momoe_core::error::{Error, Result};
use momoe_core::mgda::{mgda_step_raw, min_norm_point, ObjectiveSet};
use momoe_core::model::{LayerDynamics, MoeStack};
use momoe_core::moe::{Expert, Router, SmoeLayer};
use momoe_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::QuadraticConfig;

pub struct QuadraticTask {
    pub objectives: ObjectiveSet,
    /// One expert-layer whose expert `i` outputs `-H_i (x - c_i)`.
    pub layer: SmoeLayer,
}

/// Build the objectives and the matching gradient-field layer.
pub fn build_quadratic_task(cfg: &QuadraticConfig, seed: u64) -> Result<QuadraticTask> {
    if cfg.objectives < 2 {
        return Err(Error::Contract(format!(
            "quadratic task needs at least 2 objectives, got {}",
            cfg.objectives
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objectives = ObjectiveSet::random(
        cfg.objectives,
        cfg.dim,
        cfg.min_curvature,
        cfg.max_curvature,
        &mut rng,
    )?;
    let layer = gradient_field_layer(&objectives, cfg.objectives.min(2), &mut rng)?;
    Ok(QuadraticTask { objectives, layer })
}

/// Expert `i` computes `u_i(x) = -H_i x + H_i c_i = -H_i (x - c_i)`.
pub fn gradient_field_layer<R: Rng>(
    objectives: &ObjectiveSet,
    experts_per_token: usize,
    rng: &mut R,
) -> Result<SmoeLayer> {
    let dim = objectives.dim();
    let experts: Result<Vec<Expert>> = (0..objectives.count())
        .map(|i| {
            let h = objectives.hessian(i);
            let c = objectives.center(i);
            let w: Vec<f64> = h.iter().map(|v| -v).collect();
            let b: Vec<f64> = (0..dim)
                .map(|r| {
                    h[r * dim..(r + 1) * dim]
                        .iter()
                        .zip(c.iter())
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect();
            Expert::fixed_affine(w, b)
        })
        .collect();
    Ok(SmoeLayer {
        router: Router::new(objectives.count(), dim, experts_per_token, rng)?,
        experts: experts?,
    })
}

/// Unroll the configured dynamics on the gradient-field layer from `x0`,
/// treating layer applications as iterations. Returns the per-step mean
/// objective value, the min-norm stationarity gap, and the iterate norm.
pub struct UnrollRow {
    pub step: usize,
    pub mean_objective: f64,
    pub stationarity_gap: f64,
    pub iterate_norm: f64,
}

pub fn unroll_dynamics(
    task: &QuadraticTask,
    dynamics_cfg: &DynamicsConfig,
    x0: &[f64],
    steps: usize,
) -> Result<Vec<UnrollRow>> {
    let dim = task.objectives.dim();
    let dynamics = LayerDynamics::from_config(dynamics_cfg, dim)?;
    let stack = MoeStack {
        layers: vec![task.layer.clone(); steps],
        dynamics: vec![dynamics; steps],
    };
    let mut rows = Vec::with_capacity(steps + 1);
    let mut record = |step: usize, x: &[f64]| -> Result<()> {
        let mean_objective = (0..task.objectives.count())
            .map(|i| task.objectives.value(i, x))
            .sum::<f64>()
            / task.objectives.count() as f64;
        let gap = min_norm_point(&task.objectives.gradients(x))?.norm;
        rows.push(UnrollRow {
            step,
            mean_objective,
            stationarity_gap: gap,
            iterate_norm: x.iter().map(|v| v * v).sum::<f64>().sqrt(),
        });
        Ok(())
    };
    record(0, x0)?;
    // Reuse the stack's state threading by stepping layer by layer.
    let mut state = momoe_core::dynamics::LayerState::new(Tensor::vector(x0.to_vec())?);
    for (t, (layer, dyn_layer)) in stack.layers.iter().zip(stack.dynamics.iter()).enumerate() {
        let (next, _) = dyn_layer.step(layer, &state, t)?;
        record(t + 1, &next.x.to_vec())?;
        state = next;
    }
    Ok(rows)
}

/// Unroll the layer with the oracle's min-norm weights substituted for the
/// router, against the exact raw-gradient descent trajectory. Returns the
/// maximum absolute divergence over all steps.
pub fn oracle_substitution_divergence(
    task: &QuadraticTask,
    x0: &[f64],
    steps: usize,
    step_size: f64,
) -> Result<f64> {
    let mut layer_x = x0.to_vec();
    let mut oracle_x = x0.to_vec();
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        let oracle = mgda_step_raw(&task.objectives, &oracle_x, step_size)?;
        // Layer route: combine expert outputs with the oracle weights, then
        // take the plain residual step.
        let x_t = Tensor::vector(layer_x.clone())?;
        let out = task.layer.forward_with_weights(&x_t, &oracle.weights)?;
        let next = momoe_core::moe::plain_residual_step(&x_t, &out.combined, step_size)?;
        layer_x = next.to_vec();
        oracle_x = oracle.x_next;
        for (a, b) in layer_x.iter().zip(oracle_x.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Iterations for tuned heavy-ball and tuned plain descent to drive
/// `|x| < tol` on a diagonal quadratic with the given condition ratio.
pub struct AccelerationReport {
    pub heavy_ball_iterations: usize,
    pub plain_iterations: usize,
    pub condition_ratio: f64,
}

pub fn acceleration_comparison(
    condition_ratio: f64,
    dim: usize,
    tol: f64,
    cap: usize,
) -> Result<AccelerationReport> {
    let high = 1.0;
    let low = high / condition_ratio;
    let spectrum: Vec<f64> = (0..dim)
        .map(|i| low + (high - low) * i as f64 / (dim.max(2) - 1) as f64)
        .collect();
    let root = condition_ratio.sqrt();
    let hb_momentum = ((root - 1.0) / (root + 1.0)).powi(2);
    let hb_step = (2.0 / (high.sqrt() + low.sqrt())).powi(2);
    let gd_step = 2.0 / (high + low);

    let run = |momentum: Option<f64>, step: f64| -> Result<usize> {
        let sigma = Tensor::vector(spectrum.clone())?;
        let mut state =
            momoe_core::dynamics::LayerState::new(Tensor::vector(vec![1.0; dim])?);
        for it in 0..cap {
            if state.x.norm()?.value() < tol {
                return Ok(it);
            }
            let out = state.x.mul(&sigma)?.neg()?;
            state = match momentum {
                Some(m) => momoe_core::dynamics::heavy_ball_fixed(&out, &state, m, step)?,
                None => momoe_core::dynamics::baseline_step(
                    &out,
                    &state,
                    &momoe_core::dynamics::StepScale::Fixed(step),
                )?,
            };
        }
        Ok(cap)
    };
    Ok(AccelerationReport {
        heavy_ball_iterations: run(Some(hb_momentum), hb_step)?,
        plain_iterations: run(None, gd_step)?,
        condition_ratio,
    })
}
