//! Outer-loop parameter optimizers (SGD and AdamW).
//!
//! These update *model parameters* between forward passes and are distinct
//! from the per-layer momentum dynamics in [`crate::dynamics`], which act on
//! token representations inside a single forward pass.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn take_grad(param: &Tensor, step: usize) -> Result<Vec<f64>> {
    let g = param.grad().unwrap_or_else(|| vec![0.0; param.len()]);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { layer: 0, step });
    }
    Ok(g)
}

/// Plain stochastic gradient descent: `p <- p - lr * grad`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    steps: usize,
}

impl Sgd {
    pub fn new(learning_rate: f64) -> Self {
        Sgd {
            learning_rate,
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        self.steps += 1;
        for p in params {
            let g = take_grad(p, self.steps)?;
            let updated: Vec<f64> = p
                .data()
                .iter()
                .zip(g.iter())
                .map(|(pv, gv)| pv - self.learning_rate * gv)
                .collect();
            p.set_data(&updated)?;
        }
        Ok(())
    }
}

/// AdamW: bias-corrected moment estimates with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    steps: usize,
    first_moment: HashMap<u64, Vec<f64>>,
    second_moment: HashMap<u64, Vec<f64>>,
}

impl AdamW {
    pub fn new(learning_rate: f64) -> Self {
        AdamW {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            steps: 0,
            first_moment: HashMap::new(),
            second_moment: HashMap::new(),
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params {
            let g = take_grad(p, self.steps)?;
            let m = self
                .first_moment
                .entry(p.id())
                .or_insert_with(|| vec![0.0; p.len()]);
            let v = self
                .second_moment
                .entry(p.id())
                .or_insert_with(|| vec![0.0; p.len()]);
            let mut updated = p.to_vec();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                updated[i] -= self.learning_rate
                    * (m_hat / (v_hat.sqrt() + self.epsilon) + self.weight_decay * updated[i]);
            }
            p.set_data(&updated)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_moves_against_gradient() {
        let p = Tensor::scalar_param(0.0).unwrap();
        let loss = p.clone(); // d loss / d p = 1
        loss.backward().unwrap();
        let mut opt = Sgd::new(0.1);
        opt.step(&[p.clone()]).unwrap();
        assert!((p.value() + 0.1).abs() < 1e-15);
    }

    #[test]
    fn adamw_zero_grads_only_decays() {
        let p = Tensor::scalar_param(2.0).unwrap();
        let mut opt = AdamW::new(0.1).with_weight_decay(0.5);
        // No backward: grads absent => treated as zero.
        opt.step(&[p.clone()]).unwrap();
        assert!((p.value() - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_is_bias_corrected() {
        // grad = 1 at every coordinate => first step is ~ -lr.
        let p = Tensor::scalar_param(0.0).unwrap();
        let loss = p.clone();
        loss.backward().unwrap();
        let mut opt = AdamW::new(0.001);
        opt.step(&[p.clone()]).unwrap();
        assert!((p.value() + 0.001).abs() < 1e-8, "got {}", p.value());
    }

    #[test]
    fn non_finite_gradient_is_reported_as_divergence() {
        // ln at 0 has gradient 1/0 = inf; the optimizer must refuse it.
        let x = Tensor::scalar_param(0.0).unwrap();
        x.ln().unwrap().backward().unwrap();
        let mut opt = Sgd::new(0.1);
        assert!(matches!(
            opt.step(&[x]),
            Err(Error::Divergence { .. })
        ));
    }
}
