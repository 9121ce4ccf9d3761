//! Routers, experts, and the sparse mixture-of-experts layer forward pass.
//!
//! A layer holds `E` experts mapping `R^D -> R^D` and an affine router
//! producing per-expert affinity scores. Routing keeps the `K` largest scores
//! (ties broken toward the lower index), masks the rest to `-inf`, and
//! softmaxes, so exactly `K` experts receive nonzero combination weight. The
//! layer output is the weighted sum of the selected experts' outputs; the
//! residual update around it lives in [`crate::dynamics`].
//!
//! The selection itself is a fixed, non-differentiable set choice: gradients
//! reach the router through the softmax weights and the experts through their
//! outputs.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Affine router `scores = W x + b` with top-`K` selection.
#[derive(Debug, Clone)]
pub struct Router {
    /// `[experts, width]`
    pub weight: Tensor,
    /// `[experts]`
    pub bias: Tensor,
    pub experts_per_token: usize,
}

impl Router {
    pub fn new<R: Rng>(
        experts: usize,
        width: usize,
        experts_per_token: usize,
        rng: &mut R,
    ) -> Result<Router> {
        if experts_per_token == 0 || experts_per_token > experts {
            return Err(Error::contract(format!(
                "experts_per_token {experts_per_token} out of range 1..={experts}"
            )));
        }
        let weight = Tensor::param(
            normal_init(experts * width, width, rng),
            vec![experts, width],
        )?;
        let bias = Tensor::param(vec![0.0; experts], vec![experts])?;
        Ok(Router {
            weight,
            bias,
            experts_per_token,
        })
    }

    pub fn experts(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Raw affinity scores for one token, one per expert.
    pub fn affinity(&self, x: &Tensor) -> Result<Tensor> {
        self.weight.matmul(x)?.add(&self.bias)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

/// Routing outcome for a single token.
#[derive(Debug, Clone)]
pub struct RouterDecision {
    /// Raw affinity scores, `[experts]`.
    pub scores: Tensor,
    /// Indices of the selected experts, ascending.
    pub selected: Vec<usize>,
    /// Combination weights, `[experts]`; zero off the selected set, sums to 1.
    pub weights: Tensor,
}

/// Indices of the `k` largest entries. Ties keep the lower index, so the
/// result is deterministic for equal scores. Returned ascending.
pub fn topk_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order.into_iter().take(k).collect();
    kept.sort_unstable();
    kept
}

/// Keep the `k` largest entries of a finite score vector, set the rest to
/// `-inf`.
pub fn topk_mask(scores: &Tensor, k: usize) -> Result<Tensor> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::contract(format!(
            "top-k width {k} out of range 1..={n}"
        )));
    }
    if scores.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("topk_mask input".into()));
    }
    let kept = topk_indices(&scores.data(), k);
    scores.mask_keep(&kept)
}

/// Route one token: `softmax(topk_mask(W x + b))`.
pub fn route(router: &Router, x: &Tensor) -> Result<RouterDecision> {
    let scores = router.affinity(x)?;
    let kept = topk_indices(&scores.data(), router.experts_per_token);
    let weights = scores.mask_keep(&kept)?.softmax()?;
    Ok(RouterDecision {
        scores,
        selected: kept,
        weights,
    })
}

/// An expert network mapping `R^D -> R^D`.
#[derive(Debug, Clone)]
pub enum Expert {
    /// Two-layer perceptron `D -> hidden -> D` with ReLU.
    Mlp {
        w1: Tensor, // [hidden, width]
        b1: Tensor, // [hidden]
        w2: Tensor, // [width, hidden]
        b2: Tensor, // [width]
    },
    /// Single affine map, `u(x) = W x + b`.
    Linear {
        w: Tensor, // [width, width]
        b: Tensor, // [width]
    },
}

impl Expert {
    pub fn mlp<R: Rng>(width: usize, hidden: usize, rng: &mut R) -> Result<Expert> {
        Ok(Expert::Mlp {
            w1: Tensor::param(normal_init(hidden * width, width, rng), vec![hidden, width])?,
            b1: Tensor::param(vec![0.0; hidden], vec![hidden])?,
            w2: Tensor::param(normal_init(width * hidden, hidden, rng), vec![width, hidden])?,
            b2: Tensor::param(vec![0.0; width], vec![width])?,
        })
    }

    pub fn linear<R: Rng>(width: usize, rng: &mut R) -> Result<Expert> {
        Ok(Expert::Linear {
            w: Tensor::param(normal_init(width * width, width, rng), vec![width, width])?,
            b: Tensor::param(vec![0.0; width], vec![width])?,
        })
    }

    /// Fixed affine expert from explicit row-major coefficients. Produces a
    /// non-trainable constant expert (gradient fields for synthetic tasks).
    pub fn fixed_affine(w: Vec<f64>, b: Vec<f64>) -> Result<Expert> {
        let width = b.len();
        Ok(Expert::Linear {
            w: Tensor::new(w, vec![width, width])?,
            b: Tensor::new(b, vec![width])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Expert::Mlp { w1, b1, w2, b2 } => {
                let h = w1.matmul(x)?.add(b1)?.relu()?;
                w2.matmul(&h)?.add(b2)
            }
            Expert::Linear { w, b } => w.matmul(x)?.add(b),
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        match self {
            Expert::Mlp { w1, b1, w2, b2 } => {
                vec![w1.clone(), b1.clone(), w2.clone(), b2.clone()]
            }
            Expert::Linear { w, b } => vec![w.clone(), b.clone()],
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Expert::Mlp { w2, .. } => w2.shape()[0],
            Expert::Linear { w, .. } => w.shape()[0],
        }
    }
}

/// One sparse mixture-of-experts layer.
#[derive(Debug, Clone)]
pub struct SmoeLayer {
    pub router: Router,
    pub experts: Vec<Expert>,
}

/// Result of a layer forward pass on one token.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    /// Weighted combination of the selected experts' outputs, `[width]`.
    pub combined: Tensor,
    pub decision: RouterDecision,
    /// Outputs of the evaluated experts, indexed by expert id; `None` for
    /// experts the router skipped.
    pub expert_outputs: Vec<Option<Tensor>>,
    /// The point the layer was evaluated at (differs from the carried
    /// representation for lookahead variants).
    pub input: Tensor,
}

impl SmoeLayer {
    pub fn width(&self) -> usize {
        self.router.weight.shape()[1]
    }

    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    /// Sparse forward: route, then evaluate only the selected experts.
    pub fn forward(&self, x: &Tensor) -> Result<LayerOutput> {
        let decision = route(&self.router, x)?;
        self.combine(x, decision)
    }

    /// Dense forward: every expert contributes, weighted by a full softmax
    /// over the raw scores (no top-k mask).
    pub fn forward_dense(&self, x: &Tensor) -> Result<LayerOutput> {
        let scores = self.router.affinity(x)?;
        let weights = scores.softmax()?;
        let decision = RouterDecision {
            scores,
            selected: (0..self.experts.len()).collect(),
            weights,
        };
        self.combine(x, decision)
    }

    /// Forward with externally supplied combination weights instead of the
    /// router (oracle substitution in synthetic tasks). Weights of zero skip
    /// the expert.
    pub fn forward_with_weights(&self, x: &Tensor, weights: &[f64]) -> Result<LayerOutput> {
        if weights.len() != self.experts.len() {
            return Err(Error::contract(format!(
                "{} weights for {} experts",
                weights.len(),
                self.experts.len()
            )));
        }
        let selected: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] != 0.0).collect();
        let weight_t = Tensor::new(weights.to_vec(), vec![weights.len()])?;
        let decision = RouterDecision {
            scores: weight_t.clone(),
            selected,
            weights: weight_t,
        };
        self.combine(x, decision)
    }

    fn combine(&self, x: &Tensor, decision: RouterDecision) -> Result<LayerOutput> {
        let mut expert_outputs: Vec<Option<Tensor>> = vec![None; self.experts.len()];
        let mut combined: Option<Tensor> = None;
        for &i in &decision.selected {
            let out = self.experts[i].forward(x)?;
            let weighted = out.scale_by(&decision.weights.index(i)?)?;
            combined = Some(match combined {
                Some(acc) => acc.add(&weighted)?,
                None => weighted,
            });
            expert_outputs[i] = Some(out);
        }
        let combined = match combined {
            Some(c) => c,
            None => Tensor::zeros(vec![self.width()]),
        };
        Ok(LayerOutput {
            combined,
            decision,
            expert_outputs,
            input: x.clone(),
        })
    }

    /// Norms of *all* expert outputs at `x`, evaluated outside the gradient
    /// graph. Diagnostics use this to rank experts without touching the
    /// forward results.
    pub fn expert_output_norms(&self, x: &Tensor) -> Result<Vec<f64>> {
        let frozen = x.detach();
        self.experts
            .iter()
            .map(|e| Ok(e.forward(&frozen)?.norm()?.value()))
            .collect()
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut ps = self.router.params();
        for e in &self.experts {
            ps.extend(e.params());
        }
        // Fixed (non-trainable) experts contribute constants; filter them out.
        ps.retain(|p| p.requires_grad());
        ps
    }
}

/// Baseline residual update `x + step_size * layer_output`.
pub fn plain_residual_step(x: &Tensor, layer_output: &Tensor, step_size: f64) -> Result<Tensor> {
    if step_size <= 0.0 {
        return Err(Error::contract(format!(
            "step size must be positive, got {step_size}"
        )));
    }
    if step_size == 1.0 {
        x.add(layer_output)
    } else {
        x.add(&layer_output.scale(step_size)?)
    }
}

fn normal_init<R: Rng>(n: usize, fan_in: usize, rng: &mut R) -> Vec<f64> {
    let std = (1.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    (0..n).map(|_| dist.sample(rng)).collect()
}
