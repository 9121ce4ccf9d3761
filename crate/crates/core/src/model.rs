//! Layer stacks: mixture-of-experts layers wrapped in per-layer dynamics,
//! with momentum state threaded across layers within a forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    self, Coefficient, DynamicsConfig, LayerState, Mode, RobustParams, StepScale, ZohCoefficients,
};
use crate::error::{Error, Result};
use crate::moe::{Expert, LayerOutput, Router, SmoeLayer};
use crate::tensor::Tensor;

/// Structural description of a stack, serializable into configs/checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub layers: usize,
    /// Token representation width `D`.
    pub width: usize,
    /// Expert count `E` per layer.
    pub experts: usize,
    /// Experts selected per token `K`.
    pub experts_per_token: usize,
    pub expert_kind: ExpertKind,
    /// Hidden width multiplier for perceptron experts.
    pub hidden_multiplier: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    Perceptron,
    Linear,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            layers: 6,
            width: 64,
            experts: 8,
            experts_per_token: 2,
            expert_kind: ExpertKind::Perceptron,
            hidden_multiplier: 4,
        }
    }
}

/// Realized per-layer dynamics: a mode plus its (possibly shared, possibly
/// trainable) coefficients.
#[derive(Debug, Clone)]
pub struct LayerDynamics {
    pub mode: Mode,
    pub momentum: Coefficient,
    pub step: StepScale,
    pub momentum_im: f64,
    pub sq_decay: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub sam_radius: f64,
    pub robust: Option<RobustParams>,
    pub restart_period: Option<usize>,
    pub nag_classic: bool,
    pub detach_state: bool,
    pub zoh: Option<ZohCoefficients>,
}

impl LayerDynamics {
    /// Realize one layer's dynamics from a config. Learnable coefficients are
    /// created here; to share them across layers, build once and clone.
    pub fn from_config(cfg: &DynamicsConfig, width: usize) -> Result<LayerDynamics> {
        cfg.validate()?;
        let cfg = cfg.clone().normalized();
        let momentum = if cfg.learn_momentum {
            Coefficient::learnable(cfg.momentum)?
        } else {
            Coefficient::Fixed(cfg.momentum)
        };
        let step = if cfg.step_size_network {
            StepScale::PerToken {
                weight: Tensor::param(vec![0.0; width], vec![1, width])?,
                bias: Tensor::scalar_param(0.0)?,
            }
        } else if cfg.learn_step_size {
            StepScale::Learnable(Tensor::scalar_param(cfg.step_size)?)
        } else {
            StepScale::Fixed(cfg.step_size)
        };
        let robust = if cfg.mode == Mode::Robust {
            Some(dynamics::robust_params(
                cfg.robust.rate,
                cfg.robust.smoothness,
                cfg.robust.strong_convexity,
            )?)
        } else {
            None
        };
        let zoh = if cfg.mode == Mode::Zoh {
            Some(ZohCoefficients::new(width)?)
        } else {
            None
        };
        Ok(LayerDynamics {
            mode: cfg.mode,
            momentum,
            step,
            momentum_im: cfg.momentum_im,
            sq_decay: cfg.sq_decay,
            epsilon: cfg.epsilon,
            weight_decay: cfg.weight_decay,
            sam_radius: cfg.sam_radius,
            robust,
            restart_period: if cfg.mode == Mode::ScheduledRestart {
                Some(cfg.restart_period)
            } else {
                None
            },
            nag_classic: cfg.nag_classic_lookahead,
            detach_state: cfg.detach_state,
            zoh,
        })
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut ps = Vec::new();
        if let Some(p) = self.momentum.param() {
            ps.push(p);
        }
        ps.extend(self.step.params());
        if let Some(z) = &self.zoh {
            ps.extend(z.params());
        }
        ps
    }

    /// Advance the state through one layer. Returns the new state and the
    /// layer output that fed the update (evaluated at the lookahead point for
    /// the variants that have one).
    pub fn step(
        &self,
        layer: &SmoeLayer,
        state: &LayerState,
        layer_index: usize,
    ) -> Result<(LayerState, LayerOutput)> {
        let mut used: Option<LayerOutput> = None;
        let mut next = {
            let mut eval = |x: &Tensor| -> Result<Tensor> {
                let out = layer.forward(x)?;
                let combined = out.combined.clone();
                used = Some(out);
                Ok(combined)
            };
            match self.mode {
                Mode::Baseline => {
                    let out = eval(&state.x)?;
                    dynamics::baseline_step(&out, state, &self.step)?
                }
                Mode::HeavyBall | Mode::Negative | Mode::Learnable => {
                    let out = eval(&state.x)?;
                    dynamics::heavy_ball_step(&out, state, &self.momentum, &self.step)?
                }
                Mode::Adam => {
                    let out = eval(&state.x)?;
                    dynamics::adam_layer_step(
                        &out,
                        state,
                        self.momentum.value(),
                        self.sq_decay,
                        self.step.value_hint(),
                        self.epsilon,
                        self.weight_decay,
                    )?
                }
                Mode::Rmsprop => {
                    let out = eval(&state.x)?;
                    dynamics::rmsprop_step(
                        &out,
                        state,
                        self.momentum.value(),
                        self.step.value_hint(),
                        self.epsilon,
                    )?
                }
                Mode::Robust => {
                    let params = self.robust.as_ref().ok_or_else(|| {
                        Error::contract("robust mode without derived parameters")
                    })?;
                    dynamics::robust_momentum_step(&mut eval, state, params)?
                }
                Mode::Nag => dynamics::nag_step(
                    &mut eval,
                    state,
                    self.momentum.value(),
                    self.step.value_hint(),
                    self.nag_classic,
                )?,
                Mode::Sam => dynamics::sam_step(
                    &mut eval,
                    state,
                    self.sam_radius,
                    self.step.value_hint(),
                )?,
                Mode::TimeVarying | Mode::ScheduledRestart => {
                    let out = eval(&state.x)?;
                    dynamics::time_varying_step(
                        &out,
                        state,
                        layer_index,
                        self.step.value_hint(),
                        self.restart_period,
                    )?
                }
                Mode::Zoh => {
                    let coeffs = self.zoh.as_ref().ok_or_else(|| {
                        Error::contract("zoh mode without coefficients")
                    })?;
                    let out = eval(&state.x)?;
                    dynamics::zoh_step(&out, state, coeffs)?
                }
                Mode::Complex => {
                    let out = eval(&state.x)?;
                    dynamics::complex_momentum_step(
                        &out,
                        state,
                        self.momentum.value(),
                        self.momentum_im,
                        self.step.value_hint(),
                    )?
                }
            }
        };
        if self.detach_state {
            next.detach_carried();
        }
        let used = used.ok_or_else(|| Error::contract("dynamics step never evaluated"))?;
        Ok((next, used))
    }
}

/// What the stack observed at each layer during one forward pass.
#[derive(Debug)]
pub struct StackTrace {
    /// The layer output that fed each update.
    pub layer_outputs: Vec<LayerOutput>,
    /// Euclidean norm of each layer output.
    pub output_norms: Vec<f64>,
}

/// A stack of dynamics-wrapped mixture-of-experts layers.
#[derive(Debug, Clone)]
pub struct MoeStack {
    pub layers: Vec<SmoeLayer>,
    pub dynamics: Vec<LayerDynamics>,
}

impl MoeStack {
    /// Build a stack with freshly initialized layers and shared dynamics
    /// coefficients. The Adam and RMSProp modes follow the first-layer
    /// placement policy when `first_layer_only` is set.
    pub fn build<R: Rng>(
        shape: &ModelShape,
        dynamics_cfg: &DynamicsConfig,
        rng: &mut R,
    ) -> Result<MoeStack> {
        let mut layers = Vec::with_capacity(shape.layers);
        for _ in 0..shape.layers {
            let router = Router::new(
                shape.experts,
                shape.width,
                shape.experts_per_token,
                rng,
            )?;
            let experts: Result<Vec<Expert>> = (0..shape.experts)
                .map(|_| match shape.expert_kind {
                    ExpertKind::Perceptron => {
                        Expert::mlp(shape.width, shape.width * shape.hidden_multiplier, rng)
                    }
                    ExpertKind::Linear => Expert::linear(shape.width, rng),
                })
                .collect();
            layers.push(SmoeLayer {
                router,
                experts: experts?,
            });
        }
        let dynamics = Self::layer_dynamics(shape.layers, shape.width, dynamics_cfg)?;
        Ok(MoeStack { layers, dynamics })
    }

    /// Shared-coefficient per-layer dynamics with placement policy applied:
    /// Adam/RMSProp modes occupy only the first layer (when configured so),
    /// with standard heavy-ball layers behind them.
    pub fn layer_dynamics(
        layers: usize,
        width: usize,
        cfg: &DynamicsConfig,
    ) -> Result<Vec<LayerDynamics>> {
        let shared = LayerDynamics::from_config(cfg, width)?;
        if layers == 0 {
            return Ok(vec![]);
        }
        match shared.mode {
            Mode::Adam | Mode::Rmsprop if cfg.first_layer_only && layers > 1 => {
                let companion_cfg = DynamicsConfig {
                    mode: Mode::HeavyBall,
                    step_size: cfg.step_size,
                    detach_state: cfg.detach_state,
                    ..DynamicsConfig::default()
                };
                let companion = LayerDynamics::from_config(&companion_cfg, width)?;
                let mut out = vec![shared];
                out.extend(std::iter::repeat_with(|| companion.clone()).take(layers - 1));
                Ok(out)
            }
            _ => Ok(vec![shared; layers]),
        }
    }

    pub fn width(&self) -> usize {
        self.layers.first().map(|l| l.width()).unwrap_or(0)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Run one token through the stack. Momentum state starts at zero and is
    /// carried across layers. Errors with a non-finite report naming the
    /// layer if the representation stops being finite.
    pub fn forward(&self, x0: &Tensor) -> Result<(Tensor, StackTrace)> {
        if self.layers.len() != self.dynamics.len() {
            return Err(Error::contract(format!(
                "{} layers vs {} dynamics entries",
                self.layers.len(),
                self.dynamics.len()
            )));
        }
        let mut state = LayerState::new(x0.clone());
        let mut trace = StackTrace {
            layer_outputs: Vec::with_capacity(self.layers.len()),
            output_norms: Vec::with_capacity(self.layers.len()),
        };
        for (t, (layer, dynamics)) in self.layers.iter().zip(self.dynamics.iter()).enumerate() {
            // Non-finite state is a divergence report, not a crash; the
            // training loop fills in the step index.
            let (next, used) = dynamics.step(layer, &state, t).map_err(|e| match e {
                Error::NonFinite(_) => Error::Divergence { layer: t, step: 0 },
                other => other,
            })?;
            if next.x.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { layer: t, step: 0 });
            }
            trace.output_norms.push(used.combined.norm()?.value());
            trace.layer_outputs.push(used);
            state = next;
        }
        Ok((state.x, trace))
    }

    /// Every trainable parameter in deterministic order: layer parameters
    /// first, then the (deduplicated) dynamics coefficients.
    pub fn params(&self) -> Vec<Tensor> {
        let mut ps = Vec::new();
        for layer in &self.layers {
            ps.extend(layer.params());
        }
        for d in &self.dynamics {
            ps.extend(d.params());
        }
        dedup_params(ps)
    }
}

/// Remove duplicate parameter handles (shared coefficients appear once per
/// layer) while preserving first-seen order.
pub fn dedup_params(params: Vec<Tensor>) -> Vec<Tensor> {
    let mut seen = std::collections::HashSet::new();
    params
        .into_iter()
        .filter(|p| seen.insert(p.id()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_stack(mode: Mode) -> MoeStack {
        let shape = ModelShape {
            layers: 3,
            width: 4,
            experts: 3,
            experts_per_token: 2,
            expert_kind: ExpertKind::Perceptron,
            hidden_multiplier: 2,
        };
        let cfg = DynamicsConfig::with_mode(mode);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        MoeStack::build(&shape, &cfg, &mut rng).unwrap()
    }

    #[test]
    fn forward_produces_finite_trace() {
        for mode in [
            Mode::Baseline,
            Mode::HeavyBall,
            Mode::Adam,
            Mode::Robust,
            Mode::Nag,
            Mode::Rmsprop,
            Mode::Sam,
            Mode::TimeVarying,
            Mode::ScheduledRestart,
            Mode::Zoh,
            Mode::Negative,
            Mode::Complex,
            Mode::Learnable,
        ] {
            let stack = tiny_stack(mode);
            let x = Tensor::vector(vec![0.3, -0.1, 0.5, 0.2]).unwrap();
            let (out, trace) = stack.forward(&x).unwrap();
            assert!(out.data().iter().all(|v| v.is_finite()), "{mode:?}");
            assert_eq!(trace.output_norms.len(), 3);
            assert!(trace.output_norms.iter().all(|n| n.is_finite()));
        }
    }

    #[test]
    fn adam_mode_uses_first_layer_placement() {
        let stack = tiny_stack(Mode::Adam);
        assert_eq!(stack.dynamics[0].mode, Mode::Adam);
        assert_eq!(stack.dynamics[1].mode, Mode::HeavyBall);
        assert_eq!(stack.dynamics[2].mode, Mode::HeavyBall);
    }

    #[test]
    fn learnable_coefficients_are_shared_across_layers() {
        let stack = tiny_stack(Mode::Learnable);
        let params = stack.params();
        // Router/experts per layer plus exactly two shared dynamics scalars.
        let scalar_params: Vec<_> = params.iter().filter(|p| p.len() == 1).collect();
        assert_eq!(scalar_params.len(), 2);
    }

    #[test]
    fn gradients_reach_learnable_momentum_and_step() {
        let stack = tiny_stack(Mode::Learnable);
        let x = Tensor::vector(vec![0.4, 0.1, -0.3, 0.6]).unwrap();
        let (out, _) = stack.forward(&x).unwrap();
        let loss = out.square().unwrap().sum().unwrap();
        loss.backward().unwrap();
        let mut saw_scalar_grad = 0;
        for p in stack.params() {
            if p.len() == 1 {
                let g = p.grad().expect("scalar coefficient should receive grad");
                assert!(g[0].is_finite());
                saw_scalar_grad += 1;
            }
        }
        assert_eq!(saw_scalar_grad, 2);
    }

    #[test]
    fn momentum_state_carries_across_layers() {
        // With all experts forced to constant outputs, a 2-layer heavy-ball
        // stack must compound the first layer's velocity into the second.
        let rng = ChaCha8Rng::seed_from_u64(1);
        let width = 2;
        let mk_layer = || {
            let router = Router::new(1, width, 1, &mut rng.clone()).unwrap();
            router.weight.set_data(&[0.0, 0.0]).unwrap();
            SmoeLayer {
                router,
                experts: vec![Expert::fixed_affine(vec![0.0; 4], vec![1.0, 2.0]).unwrap()],
            }
        };
        let cfg = DynamicsConfig::default(); // heavy-ball 0.7 / 1.0
        let dynamics = MoeStack::layer_dynamics(2, width, &cfg).unwrap();
        let stack = MoeStack {
            layers: vec![mk_layer(), mk_layer()],
            dynamics,
        };
        let x = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let (out, _) = stack.forward(&x).unwrap();
        // layer 0: p = (1,2), x = (1,2)
        // layer 1: p = (1,2) + 0.7*(1,2) = (1.7,3.4), x = (2.7,5.4)
        let got = out.to_vec();
        assert!((got[0] - 2.7).abs() < 1e-12 && (got[1] - 5.4).abs() < 1e-12);
    }

    #[test]
    fn detach_state_blocks_cross_layer_gradient() {
        let shape = ModelShape {
            layers: 2,
            width: 3,
            experts: 2,
            experts_per_token: 1,
            expert_kind: ExpertKind::Linear,
            hidden_multiplier: 1,
        };
        let mut cfg = DynamicsConfig::default();
        cfg.detach_state = true;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let stack = MoeStack::build(&shape, &cfg, &mut rng).unwrap();
        let x = Tensor::vector(vec![0.2, 0.4, -0.1]).unwrap();
        let (out, _) = stack.forward(&x).unwrap();
        // Still trainable end to end through x itself.
        let loss = out.norm().unwrap();
        loss.backward().unwrap();
    }
}
