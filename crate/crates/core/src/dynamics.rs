//! Momentum-accelerated layer dynamics.
//!
//! Every wrapper here consumes the mixture-of-experts layer output for the
//! current token (`output` below) together with the running [`LayerState`],
//! and produces the next representation `x` plus updated state. In the
//! gradient-descent reading of the residual update, the layer output plays
//! the role of a *negative* gradient: the heavy-ball recurrence is
//!
//! ```text
//! p_t = output + momentum * p_{t-1};     x_{t+1} = x_t + step_size * p_t
//! ```
//!
//! Variants: plain residual baseline, heavy-ball, Adam-style (elementwise
//! second moments + decoupled weight decay), robust momentum (lookahead
//! evaluation point with parameters derived from a condition ratio), Nesterov
//! lookahead, RMSProp scaling, sharpness-aware perturbation, time-varying and
//! scheduled-restart momentum, zero-order-hold discretized coefficients, and
//! negative/complex momentum.
//!
//! State is threaded *across* layers within one forward pass: the momentum
//! buffer is carried, never reset per layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-token dynamical state threaded through the layer stack.
#[derive(Debug, Clone)]
pub struct LayerState {
    /// Current representation.
    pub x: Tensor,
    /// Momentum buffer `p`, zero-initialized at the first layer.
    pub velocity: Tensor,
    /// Imaginary part of the momentum buffer (complex momentum only).
    pub velocity_im: Tensor,
    /// Elementwise second-moment accumulator (Adam/RMSProp style).
    pub second_moment: Tensor,
    /// Previous representation (two-form and robust variants).
    pub x_prev: Tensor,
}

impl LayerState {
    pub fn new(x: Tensor) -> LayerState {
        let width = x.len();
        LayerState {
            velocity: Tensor::zeros(vec![width]),
            velocity_im: Tensor::zeros(vec![width]),
            second_moment: Tensor::zeros(vec![width]),
            x_prev: x.clone(),
            x,
        }
    }

    /// Cut the gradient history of the carried buffers (the representation
    /// itself stays connected).
    pub fn detach_carried(&mut self) {
        self.velocity = self.velocity.detach();
        self.velocity_im = self.velocity_im.detach();
        self.second_moment = self.second_moment.detach();
        self.x_prev = self.x_prev.detach();
    }

    fn advance(&self, x_next: Tensor) -> LayerState {
        LayerState {
            x_prev: self.x.clone(),
            x: x_next,
            velocity: self.velocity.clone(),
            velocity_im: self.velocity_im.clone(),
            second_moment: self.second_moment.clone(),
        }
    }
}

/// A dynamics coefficient: a fixed constant or a trainable scalar.
#[derive(Debug, Clone)]
pub enum Coefficient {
    Fixed(f64),
    Learnable(Tensor),
}

impl Coefficient {
    pub fn fixed(v: f64) -> Coefficient {
        Coefficient::Fixed(v)
    }

    pub fn learnable(v: f64) -> Result<Coefficient> {
        Ok(Coefficient::Learnable(Tensor::scalar_param(v)?))
    }

    pub fn value(&self) -> f64 {
        match self {
            Coefficient::Fixed(v) => *v,
            Coefficient::Learnable(t) => t.value(),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Coefficient::Fixed(v) if *v == 0.0)
    }

    pub fn scale(&self, t: &Tensor) -> Result<Tensor> {
        match self {
            Coefficient::Fixed(v) => t.scale(*v),
            Coefficient::Learnable(s) => t.scale_by(s),
        }
    }

    pub fn param(&self) -> Option<Tensor> {
        match self {
            Coefficient::Fixed(_) => None,
            Coefficient::Learnable(t) => Some(t.clone()),
        }
    }
}

/// Step-size policy: fixed, trainable scalar, or a per-token network
/// `sigmoid(w . x + b)` producing an input-dependent step in (0, 1).
#[derive(Debug, Clone)]
pub enum StepScale {
    Fixed(f64),
    Learnable(Tensor),
    PerToken { weight: Tensor, bias: Tensor },
}

impl StepScale {
    pub fn value_hint(&self) -> f64 {
        match self {
            StepScale::Fixed(v) => *v,
            StepScale::Learnable(t) => t.value(),
            StepScale::PerToken { .. } => f64::NAN,
        }
    }

    /// Evaluate the (possibly input-dependent) step size at `x` as a scalar
    /// tensor, or `None` for the fixed-1 fast path.
    pub fn at(&self, x: &Tensor) -> Result<Option<Tensor>> {
        match self {
            StepScale::Fixed(_) => Ok(None),
            StepScale::Learnable(t) => Ok(Some(t.clone())),
            StepScale::PerToken { weight, bias } => {
                let raw = weight.matmul(x)?.index(0)?.add(bias)?;
                Ok(Some(raw.sigmoid()?))
            }
        }
    }

    /// `step(x) * v`.
    pub fn apply(&self, x: &Tensor, v: &Tensor) -> Result<Tensor> {
        match self {
            StepScale::Fixed(c) if *c == 1.0 => Ok(v.clone()),
            StepScale::Fixed(c) => v.scale(*c),
            _ => {
                let s = self.at(x)?.expect("non-fixed step produces a tensor");
                v.scale_by(&s)
            }
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        match self {
            StepScale::Fixed(_) => vec![],
            StepScale::Learnable(t) => vec![t.clone()],
            StepScale::PerToken { weight, bias } => vec![weight.clone(), bias.clone()],
        }
    }
}

// ---- fundamental steps -------------------------------------------------------

/// Plain residual update (no momentum): `x' = x + step * output`.
pub fn baseline_step(output: &Tensor, state: &LayerState, step: &StepScale) -> Result<LayerState> {
    let x_next = state.x.add(&step.apply(&state.x, output)?)?;
    Ok(state.advance(x_next))
}

/// Heavy-ball: `p' = output + momentum p; x' = x + step p'`.
pub fn heavy_ball_step(
    output: &Tensor,
    state: &LayerState,
    momentum: &Coefficient,
    step: &StepScale,
) -> Result<LayerState> {
    let velocity = if momentum.is_zero() {
        output.clone()
    } else {
        output.add(&momentum.scale(&state.velocity)?)?
    };
    let x_next = state.x.add(&step.apply(&state.x, &velocity)?)?;
    let mut next = state.advance(x_next);
    next.velocity = velocity;
    Ok(next)
}

/// Heavy-ball with plain float coefficients.
pub fn heavy_ball_fixed(
    output: &Tensor,
    state: &LayerState,
    momentum: f64,
    step_size: f64,
) -> Result<LayerState> {
    heavy_ball_step(
        output,
        state,
        &Coefficient::Fixed(momentum),
        &StepScale::Fixed(step_size),
    )
}

/// Two-variable form of the same recurrence, written on representations:
/// `x' = x - step * grad + momentum (x - x_prev)`.
///
/// `grad` is the *gradient-convention* field, i.e. the negation of the layer
/// output used by [`heavy_ball_step`]. Kept as an independent oracle for
/// equivalence checks.
pub fn two_form_step(
    grad: &Tensor,
    x: &Tensor,
    x_prev: &Tensor,
    momentum: f64,
    step_size: f64,
) -> Result<Tensor> {
    let drift = x.sub(x_prev)?.scale(momentum)?;
    x.sub(&grad.scale(step_size)?)?.add(&drift)
}

/// Adam-style update with decoupled weight decay:
/// `p' = mu p + (1-mu) output; m' = beta m + (1-beta) output^2;
///  x' = x + step * p'/(sqrt(m') + eps) - decay * x`.
pub fn adam_layer_step(
    output: &Tensor,
    state: &LayerState,
    momentum: f64,
    sq_decay: f64,
    step_size: f64,
    epsilon: f64,
    weight_decay: f64,
) -> Result<LayerState> {
    if !(0.0..1.0).contains(&momentum) || !(0.0..1.0).contains(&sq_decay) {
        return Err(Error::contract(format!(
            "adam decay coefficients must lie in [0,1): momentum {momentum}, sq_decay {sq_decay}"
        )));
    }
    if epsilon <= 0.0 {
        return Err(Error::contract("adam epsilon must be positive"));
    }
    let velocity = state
        .velocity
        .scale(momentum)?
        .add(&output.scale(1.0 - momentum)?)?;
    let second = state
        .second_moment
        .scale(sq_decay)?
        .add(&output.square()?.scale(1.0 - sq_decay)?)?;
    let denom = second.sqrt()?.add_scalar(epsilon)?;
    let mut x_next = state.x.add(&velocity.div(&denom)?.scale(step_size)?)?;
    if weight_decay != 0.0 {
        x_next = x_next.sub(&state.x.scale(weight_decay)?)?;
    }
    let mut next = state.advance(x_next);
    next.velocity = velocity;
    next.second_moment = second;
    Ok(next)
}

/// Derived robust-momentum parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustParams {
    pub step_size: f64,
    pub momentum: f64,
    /// Lookahead weight on the momentum direction.
    pub lookahead: f64,
    pub condition_ratio: f64,
}

/// Derive the robust-momentum triple from the rate parameter and the
/// smoothness / strong-convexity pair:
/// `step = k(1-p)^2(1+p)/L`, `momentum = k p^3/(k-1)`,
/// `lookahead = p^3/((k-1)(1-p)^2(1+p))` with `k = L/m`.
pub fn robust_params(
    rate: f64,
    smoothness: f64,
    strong_convexity: f64,
) -> Result<RobustParams> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::contract(format!(
            "robust rate must lie in (0,1), got {rate}"
        )));
    }
    if !(strong_convexity > 0.0 && strong_convexity < smoothness) {
        return Err(Error::contract(format!(
            "robust momentum requires 0 < strong_convexity < smoothness \
             (condition ratio > 1), got m={strong_convexity}, L={smoothness}"
        )));
    }
    let k = smoothness / strong_convexity;
    let p = rate;
    let shrink = (1.0 - p) * (1.0 - p) * (1.0 + p);
    Ok(RobustParams {
        step_size: k * shrink / smoothness,
        momentum: k * p.powi(3) / (k - 1.0),
        lookahead: p.powi(3) / ((k - 1.0) * shrink),
        condition_ratio: k,
    })
}

/// Where the robust parameterization relocates the frequency-domain
/// stability boundary on the real axis: `(1+p)(1 - k + 2kp - kp^2) / (2p)`.
pub fn robust_stability_boundary(rate: f64, condition_ratio: f64) -> f64 {
    let (p, k) = (rate, condition_ratio);
    (1.0 + p) * (1.0 - k + 2.0 * k * p - k * p * p) / (2.0 * p)
}

/// Robust momentum: evaluate the layer at the lookahead point
/// `y = x + lookahead*step*p`, then heavy-ball with the derived coefficients.
pub fn robust_momentum_step<F>(
    mut layer_output: F,
    state: &LayerState,
    params: &RobustParams,
) -> Result<LayerState>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let shift = params.lookahead * params.step_size;
    let lookahead_point = if shift == 0.0 {
        state.x.clone()
    } else {
        state.x.add(&state.velocity.scale(shift)?)?
    };
    let output = layer_output(&lookahead_point)?;
    heavy_ball_fixed(&output, state, params.momentum, params.step_size)
}

/// Nesterov lookahead: `p' = step * output(x - momentum p) + momentum p;
/// x' = x + p'`. The step size multiplies inside the momentum buffer here.
/// The default lookahead point follows the sign convention as published
/// (`x - momentum p`); `classic_lookahead` flips it to `x + momentum p`.
pub fn nag_step<F>(
    mut layer_output: F,
    state: &LayerState,
    momentum: f64,
    step_size: f64,
    classic_lookahead: bool,
) -> Result<LayerState>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let lookahead_point = if momentum == 0.0 {
        state.x.clone()
    } else if classic_lookahead {
        state.x.add(&state.velocity.scale(momentum)?)?
    } else {
        state.x.sub(&state.velocity.scale(momentum)?)?
    };
    let output = layer_output(&lookahead_point)?;
    let velocity = if momentum == 0.0 {
        output.scale(step_size)?
    } else {
        output
            .scale(step_size)?
            .add(&state.velocity.scale(momentum)?)?
    };
    let x_next = state.x.add(&velocity)?;
    let mut next = state.advance(x_next);
    next.velocity = velocity;
    Ok(next)
}

/// RMSProp scaling: `m' = mu m + (1-mu) output^2;
/// x' = x + step * output / sqrt(m' + eps)`. The running square lives in the
/// second-moment slot of the state.
pub fn rmsprop_step(
    output: &Tensor,
    state: &LayerState,
    momentum: f64,
    step_size: f64,
    epsilon: f64,
) -> Result<LayerState> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::contract(format!(
            "rmsprop decay must lie in [0,1), got {momentum}"
        )));
    }
    let second = state
        .second_moment
        .scale(momentum)?
        .add(&output.square()?.scale(1.0 - momentum)?)?;
    let denom = second.add_scalar(epsilon)?.sqrt()?;
    let x_next = state.x.add(&output.div(&denom)?.scale(step_size)?)?;
    let mut next = state.advance(x_next);
    next.second_moment = second;
    Ok(next)
}

/// Sharpness-aware perturbation of norm `radius` along the descent-signal
/// direction, or `None` when the output is too small to normalize.
pub fn sam_perturbation(output: &[f64], radius: f64) -> Option<Vec<f64>> {
    let norm: f64 = output.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return None;
    }
    // The layer output is the negative gradient, so the ascent direction
    // (where the perturbed evaluation probes the landscape) is its negation.
    Some(output.iter().map(|v| -radius * v / norm).collect())
}

/// Sharpness-aware step: evaluate once at `x`, once at the perturbed point,
/// and advance with the perturbed output: `x' = x + step * output(x + e)`.
/// Degenerates to the plain step when the radius is zero or the output norm
/// vanishes.
pub fn sam_step<F>(
    mut layer_output: F,
    state: &LayerState,
    radius: f64,
    step_size: f64,
) -> Result<LayerState>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    if radius < 0.0 {
        return Err(Error::contract(format!(
            "perturbation radius must be nonnegative, got {radius}"
        )));
    }
    let base = layer_output(&state.x)?;
    let shift = if radius == 0.0 {
        None
    } else {
        sam_perturbation(&base.data(), radius)
    };
    let used = match shift {
        None => base,
        Some(shift) => {
            let probe = state.x.add(&Tensor::new(shift, vec![state.x.len()])?)?;
            layer_output(&probe)?
        }
    };
    let x_next = state.x.add(&used.scale(step_size)?)?;
    Ok(state.advance(x_next))
}

/// Momentum coefficient for the time-varying schedule. Without a restart
/// period this is `(t-1)/(t+2)`; with one, `t` is replaced by `t mod period`,
/// giving `(t mod period) / (t mod period + 3)`.
pub fn time_varying_momentum(layer_index: usize, restart_period: Option<usize>) -> f64 {
    let s = match restart_period {
        Some(period) => (layer_index % period) as f64,
        None => layer_index as f64 - 1.0,
    };
    s / (s + 3.0)
}

/// Heavy-ball with the time-varying (optionally restarted) momentum schedule.
pub fn time_varying_step(
    output: &Tensor,
    state: &LayerState,
    layer_index: usize,
    step_size: f64,
    restart_period: Option<usize>,
) -> Result<LayerState> {
    let momentum = time_varying_momentum(layer_index, restart_period);
    heavy_ball_fixed(output, state, momentum, step_size)
}

/// Zero-order-hold discretization of the momentum/step pair.
///
/// `interval = softplus(raw_interval)`; with `z = interval * momentum_raw`:
/// `momentum_d = exp(z)` and `step_d = (exp(z)-1)/z * interval * step_raw`.
pub fn zoh_params(raw_interval: f64, momentum_raw: f64, step_raw: f64) -> (f64, f64) {
    let interval = crate::tensor::softplus(raw_interval);
    let z = interval * momentum_raw;
    let momentum_d = z.exp();
    let step_d = crate::tensor::expm1_over(z) * interval * step_raw;
    (momentum_d, step_d)
}

/// Trainable zero-order-hold coefficients: a raw interval scalar, a raw
/// momentum scalar, and a linear network producing the raw per-token step.
#[derive(Debug, Clone)]
pub struct ZohCoefficients {
    pub raw_interval: Tensor,
    pub raw_momentum: Tensor,
    pub step_weight: Tensor,
    pub step_bias: Tensor,
}

impl ZohCoefficients {
    pub fn new(width: usize) -> Result<ZohCoefficients> {
        // Starts near (momentum, step) = (0.7, 1.0): softplus(0) * -0.515
        // gives exp(z) = 0.70, and the bias compensates the (exp(z)-1)/z
        // factor so the initial step is close to 1.
        let raw_interval = Tensor::scalar_param(0.0)?;
        let raw_momentum = Tensor::scalar_param(-0.515)?;
        let step_weight = Tensor::param(vec![0.0; width], vec![1, width])?;
        let step_bias = Tensor::scalar_param(1.7)?;
        Ok(ZohCoefficients {
            raw_interval,
            raw_momentum,
            step_weight,
            step_bias,
        })
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![
            self.raw_interval.clone(),
            self.raw_momentum.clone(),
            self.step_weight.clone(),
            self.step_bias.clone(),
        ]
    }

    fn discretize(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let interval = self.raw_interval.softplus()?;
        let z = interval.mul(&self.raw_momentum)?;
        let momentum_d = z.exp()?;
        let step_raw = self.step_weight.matmul(x)?.index(0)?.add(&self.step_bias)?;
        let step_d = z.expm1_over()?.mul(&interval.mul(&step_raw)?)?;
        Ok((momentum_d, step_d))
    }
}

/// Heavy-ball with zero-order-hold discretized, trainable coefficients.
pub fn zoh_step(
    output: &Tensor,
    state: &LayerState,
    coeffs: &ZohCoefficients,
) -> Result<LayerState> {
    let (momentum_d, step_d) = coeffs.discretize(&state.x)?;
    let velocity = output.add(&state.velocity.scale_by(&momentum_d)?)?;
    let x_next = state.x.add(&velocity.scale_by(&step_d)?)?;
    let mut next = state.advance(x_next);
    next.velocity = velocity;
    Ok(next)
}

/// Complex momentum: the buffer is complex with a real layer output, and the
/// representation advances by the real part only. With a purely real
/// coefficient this is exactly the heavy-ball step.
pub fn complex_momentum_step(
    output: &Tensor,
    state: &LayerState,
    momentum_re: f64,
    momentum_im: f64,
    step_size: f64,
) -> Result<LayerState> {
    if momentum_im == 0.0 {
        return heavy_ball_fixed(output, state, momentum_re, step_size);
    }
    let velocity = output
        .add(&state.velocity.scale(momentum_re)?)?
        .sub(&state.velocity_im.scale(momentum_im)?)?;
    let velocity_im = state
        .velocity_im
        .scale(momentum_re)?
        .add(&state.velocity.scale(momentum_im)?)?;
    let x_next = state.x.add(&velocity.scale(step_size)?)?;
    let mut next = state.advance(x_next);
    next.velocity = velocity;
    next.velocity_im = velocity_im;
    Ok(next)
}

// ---- configuration -----------------------------------------------------------

/// Dynamics variants selectable per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    HeavyBall,
    Adam,
    Robust,
    Nag,
    Rmsprop,
    Sam,
    TimeVarying,
    ScheduledRestart,
    Zoh,
    Negative,
    Complex,
    /// Heavy-ball with trainable scalar momentum and step size.
    Learnable,
}

/// Robust-momentum inputs. The smoothness/strong-convexity pair is
/// user-supplied configuration; the derived triple comes from
/// [`robust_params`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustConfig {
    pub rate: f64,
    pub smoothness: f64,
    pub strong_convexity: f64,
}

impl Default for RobustConfig {
    fn default() -> Self {
        RobustConfig {
            rate: 0.5,
            smoothness: 1.0,
            strong_convexity: 0.1,
        }
    }
}

/// Full dynamics configuration, serializable into experiment files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsConfig {
    pub mode: Mode,
    pub momentum: f64,
    /// Imaginary part of the momentum coefficient (complex mode).
    pub momentum_im: f64,
    pub step_size: f64,
    /// Second-moment decay (Adam mode).
    pub sq_decay: f64,
    pub epsilon: f64,
    /// Decoupled weight decay on the representation (Adam mode).
    pub weight_decay: f64,
    /// Perturbation radius (sharpness-aware mode).
    pub sam_radius: f64,
    pub robust: RobustConfig,
    pub restart_period: usize,
    pub learn_momentum: bool,
    pub learn_step_size: bool,
    /// Learn the step size as a per-token sigmoid-of-linear network.
    pub step_size_network: bool,
    /// Cut gradient flow through carried state between layers.
    pub detach_state: bool,
    /// Use the classical `x + momentum p` Nesterov lookahead instead of the
    /// published `x - momentum p`.
    pub nag_classic_lookahead: bool,
    /// Permit momentum outside (-1, 1); no convergence guarantee applies.
    pub allow_unstable_momentum: bool,
    /// Placement policy for Adam/RMSProp-style layers: apply the adaptive
    /// variant in the first layer only and heavy-ball in the rest.
    pub first_layer_only: bool,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            mode: Mode::HeavyBall,
            momentum: 0.7,
            momentum_im: 0.0,
            step_size: 1.0,
            sq_decay: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            sam_radius: 0.05,
            robust: RobustConfig::default(),
            restart_period: 3,
            learn_momentum: false,
            learn_step_size: false,
            step_size_network: false,
            detach_state: false,
            nag_classic_lookahead: false,
            allow_unstable_momentum: false,
            first_layer_only: true,
        }
    }
}

impl DynamicsConfig {
    pub fn with_mode(mode: Mode) -> DynamicsConfig {
        let mut cfg = DynamicsConfig {
            mode,
            ..DynamicsConfig::default()
        };
        match mode {
            Mode::Adam | Mode::Rmsprop => cfg.momentum = 0.9,
            Mode::Negative => cfg.momentum = -0.3,
            Mode::Complex => {
                cfg.momentum = 0.55;
                cfg.momentum_im = 0.3;
            }
            Mode::Learnable => {
                cfg.learn_momentum = true;
                cfg.learn_step_size = true;
            }
            _ => {}
        }
        cfg
    }

    /// Promote momentum and/or step size to trainable scalars. Only the
    /// heavy-ball recurrence supports this.
    pub fn make_learnable(mut self, momentum: bool, step_size: bool) -> Result<DynamicsConfig> {
        if !matches!(self.mode, Mode::HeavyBall | Mode::Learnable) {
            return Err(Error::contract(format!(
                "learnable coefficients require the heavy-ball mode, got {:?}",
                self.mode
            )));
        }
        self.mode = Mode::HeavyBall;
        self.learn_momentum = momentum;
        self.learn_step_size = step_size;
        Ok(self)
    }

    /// Resolve aliases: `learnable` and `negative` are heavy-ball
    /// parameterizations.
    pub fn normalized(mut self) -> DynamicsConfig {
        match self.mode {
            Mode::Learnable => {
                self.mode = Mode::HeavyBall;
                self.learn_momentum = true;
                self.learn_step_size = true;
            }
            Mode::Negative => {
                self.mode = Mode::HeavyBall;
            }
            _ => {}
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > -1.0 && v < 1.0;
        match self.mode {
            Mode::HeavyBall | Mode::TimeVarying | Mode::ScheduledRestart | Mode::Learnable => {
                if !self.allow_unstable_momentum
                    && !self.learn_momentum
                    && matches!(self.mode, Mode::HeavyBall)
                    && !in_unit(self.momentum)
                {
                    return Err(Error::contract(format!(
                        "heavy-ball momentum {} outside (-1, 1); set \
                         allow_unstable_momentum to override",
                        self.momentum
                    )));
                }
            }
            Mode::Negative => {
                if self.momentum >= 0.0 {
                    return Err(Error::contract(format!(
                        "negative-momentum mode requires momentum < 0, got {}",
                        self.momentum
                    )));
                }
                if !self.allow_unstable_momentum && !in_unit(self.momentum) {
                    return Err(Error::contract(format!(
                        "momentum {} outside (-1, 1); set allow_unstable_momentum \
                         to override",
                        self.momentum
                    )));
                }
            }
            Mode::Adam => {
                if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.sq_decay) {
                    return Err(Error::contract(
                        "adam mode requires momentum and sq_decay in [0,1)",
                    ));
                }
                if self.epsilon <= 0.0 {
                    return Err(Error::contract("adam epsilon must be positive"));
                }
            }
            Mode::Rmsprop => {
                if !(0.0..1.0).contains(&self.momentum) {
                    return Err(Error::contract(
                        "rmsprop mode requires momentum in [0,1)",
                    ));
                }
            }
            Mode::Robust => {
                robust_params(
                    self.robust.rate,
                    self.robust.smoothness,
                    self.robust.strong_convexity,
                )?;
            }
            Mode::Nag => {
                if !(0.0..1.0).contains(&self.momentum) {
                    return Err(Error::contract(
                        "nesterov mode requires momentum in [0,1)",
                    ));
                }
                if self.step_size <= 0.0 {
                    return Err(Error::contract("step size must be positive"));
                }
            }
            Mode::Sam => {
                if self.sam_radius < 0.0 {
                    return Err(Error::contract(
                        "perturbation radius must be nonnegative",
                    ));
                }
            }
            Mode::Baseline | Mode::Zoh | Mode::Complex => {}
        }
        Ok(())
    }
}

/// Per-layer mode assignment: the adaptive first-layer placement policy puts
/// the Adam-style layer first and heavy-ball everywhere else; disabled, the
/// whole stack is heavy-ball.
pub fn adam_first_layer_policy(layers: usize, enabled: bool) -> Vec<Mode> {
    if layers == 0 {
        return vec![];
    }
    if !enabled {
        return vec![Mode::HeavyBall; layers];
    }
    let mut modes = vec![Mode::HeavyBall; layers];
    modes[0] = Mode::Adam;
    modes
}
