//! Desk-scale next-token task: a seeded Markov corpus over a small
//! vocabulary and a model of dynamics-wrapped expert layers between an
//! embedding and an output head.
//!
//! Token 0 is reserved as the corruption sentinel and never generated, so
//! sentinel swaps at evaluation time are genuinely out-of-distribution.

use momoe_core::checkpoint::Checkpoint;
use momoe_core::dynamics::DynamicsConfig;
use momoe_core::error::{Error, Result};
use momoe_core::model::{dedup_params, ModelShape, MoeStack};
use momoe_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::LmConfig;

/// Token id sequences with a train/valid split.
#[derive(Debug, Clone)]
pub struct TinyCorpus {
    pub train: Vec<Vec<u32>>,
    pub valid: Vec<Vec<u32>>,
    pub vocab: usize,
}

impl TinyCorpus {
    pub fn train_tokens(&self) -> impl Iterator<Item = u32> + '_ {
        self.train.iter().flatten().copied()
    }
}

/// Generate a corpus from a first-order chain: from state `s`, move to a
/// fixed pseudorandom successor with probability `pattern_strength`,
/// otherwise to a uniform non-sentinel token. States live in `1..vocab`.
pub fn build_corpus(cfg: &LmConfig, seed: u64) -> Result<TinyCorpus> {
    if cfg.vocab < 2 || cfg.vocab > 256 {
        return Err(Error::Contract(format!(
            "vocab {} outside 2..=256",
            cfg.vocab
        )));
    }
    if cfg.seq_len < 2 || cfg.seq_len > 64 {
        return Err(Error::Contract(format!(
            "seq_len {} outside 2..=64",
            cfg.seq_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = (cfg.vocab - 1) as u32; // non-sentinel tokens: 1..vocab
    let successor = |s: u32| -> u32 { 1 + ((s - 1) * 5 + 3) % states };
    let mut draw_seq = |rng: &mut ChaCha8Rng| -> Vec<u32> {
        let mut seq = Vec::with_capacity(cfg.seq_len);
        let mut state: u32 = rng.random_range(1..cfg.vocab as u32);
        seq.push(state);
        for _ in 1..cfg.seq_len {
            state = if rng.random_range(0.0..1.0) < cfg.pattern_strength {
                successor(state)
            } else {
                rng.random_range(1..cfg.vocab as u32)
            };
            seq.push(state);
        }
        seq
    };
    let train = (0..cfg.train_sequences).map(|_| draw_seq(&mut rng)).collect();
    let valid = (0..cfg.valid_sequences).map(|_| draw_seq(&mut rng)).collect();
    Ok(TinyCorpus {
        train,
        valid,
        vocab: cfg.vocab,
    })
}

/// Replace each token independently by the sentinel with probability
/// `swap_rate`.
pub fn corrupt_tokens(
    sequences: &[Vec<u32>],
    swap_rate: f64,
    sentinel_id: u32,
    seed: u64,
) -> Result<Vec<Vec<u32>>> {
    if !(0.0..=1.0).contains(&swap_rate) {
        return Err(Error::Contract(format!(
            "swap_rate {swap_rate} outside [0,1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sequences
        .iter()
        .map(|seq| {
            seq.iter()
                .map(|&tok| {
                    if rng.random_range(0.0..1.0) < swap_rate {
                        sentinel_id
                    } else {
                        tok
                    }
                })
                .collect()
        })
        .collect())
}

/// Entropy (nats) of the empirical unigram distribution of the training
/// tokens: the bar a next-token model must beat.
pub fn unigram_entropy(corpus: &TinyCorpus) -> f64 {
    let mut counts = vec![0u64; corpus.vocab];
    let mut total = 0u64;
    for tok in corpus.train_tokens() {
        counts[tok as usize] += 1;
        total += 1;
    }
    let mut entropy = 0.0;
    for &c in &counts {
        if c == 0 {
            continue;
        }
        let p = c as f64 / total as f64;
        entropy -= p * p.ln();
    }
    entropy
}

/// Next-token model: embedding -> dynamics-wrapped expert stack -> head.
#[derive(Debug, Clone)]
pub struct TinyLm {
    pub vocab: usize,
    /// `[vocab, width]`; row per token.
    pub embed: Tensor,
    pub stack: MoeStack,
    /// `[vocab, width]` output projection plus bias.
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl TinyLm {
    pub fn build(
        vocab: usize,
        shape: &ModelShape,
        dynamics: &DynamicsConfig,
        seed: u64,
    ) -> Result<TinyLm> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = shape.width;
        let normal = Normal::new(0.0, 0.05).expect("valid normal");
        let embed = Tensor::param(
            (0..vocab * width).map(|_| normal.sample(&mut rng)).collect(),
            vec![vocab, width],
        )?;
        let stack = MoeStack::build(shape, dynamics, &mut rng)?;
        let head_std = (1.0 / width as f64).sqrt();
        let head_dist = Normal::new(0.0, head_std).expect("valid normal");
        let head_weight = Tensor::param(
            (0..vocab * width).map(|_| head_dist.sample(&mut rng)).collect(),
            vec![vocab, width],
        )?;
        let head_bias = Tensor::param(vec![0.0; vocab], vec![vocab])?;
        Ok(TinyLm {
            vocab,
            embed,
            stack,
            head_weight,
            head_bias,
        })
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut ps = vec![self.embed.clone()];
        ps.extend(self.stack.params());
        ps.push(self.head_weight.clone());
        ps.push(self.head_bias.clone());
        dedup_params(ps)
    }

    /// Logits for the next token given the current one.
    pub fn logits(&self, token: u32) -> Result<Tensor> {
        let x0 = self.embed.row(token as usize)?;
        let (h, _) = self.stack.forward(&x0)?;
        self.head_weight.matmul(&h)?.add(&self.head_bias)
    }

    /// Mean cross-entropy (nats) over `(input, target)` transitions, as a
    /// differentiable scalar.
    pub fn batch_loss(&self, transitions: &[(u32, u32)]) -> Result<Tensor> {
        let mut total: Option<Tensor> = None;
        for &(input, target) in transitions {
            let probs = self.logits(input)?.softmax()?;
            let nll = probs.index(target as usize)?.ln()?.scale(-1.0)?;
            total = Some(match total {
                Some(acc) => acc.add(&nll)?,
                None => nll,
            });
        }
        let total = total.ok_or_else(|| Error::Contract("empty batch".into()))?;
        total.scale(1.0 / transitions.len() as f64)
    }

    /// Mean cross-entropy over all transitions of a sequence set, without
    /// touching gradients.
    pub fn evaluate(&self, sequences: &[Vec<u32>]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for seq in sequences {
            for pair in seq.windows(2) {
                let loss = self.batch_loss(&[(pair[0], pair[1])])?;
                total += loss.value();
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::DegenerateInput("no transitions to evaluate".into()));
        }
        Ok(total / count as f64)
    }

    /// Embedded representations of a token batch, detached, for diagnostics.
    pub fn embedded_batch(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        tokens
            .iter()
            .map(|&t| Ok(self.embed.row(t as usize)?.detach().to_vec()))
            .collect()
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(meta);
        ckpt.insert("embed", &self.embed)?;
        for (t, layer) in self.stack.layers.iter().enumerate() {
            ckpt.insert(&format!("layer{t}.router.weight"), &layer.router.weight)?;
            ckpt.insert(&format!("layer{t}.router.bias"), &layer.router.bias)?;
            for (i, expert) in layer.experts.iter().enumerate() {
                for (j, p) in expert.params().iter().enumerate() {
                    ckpt.insert(&format!("layer{t}.expert{i}.p{j}"), p)?;
                }
            }
        }
        for (t, dynamics) in self.stack.dynamics.iter().enumerate() {
            for (j, p) in dynamics.params().iter().enumerate() {
                ckpt.insert(&format!("layer{t}.dynamics.p{j}"), p)?;
            }
        }
        ckpt.insert("head.weight", &self.head_weight)?;
        ckpt.insert("head.bias", &self.head_bias)?;
        Ok(ckpt)
    }

    /// Rebuild a model with the same architecture and restore every stored
    /// tensor into it.
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        vocab: usize,
        shape: &ModelShape,
        dynamics: &DynamicsConfig,
    ) -> Result<TinyLm> {
        let model = TinyLm::build(vocab, shape, dynamics, 0)?;
        ckpt.restore("embed", &model.embed)?;
        for (t, layer) in model.stack.layers.iter().enumerate() {
            ckpt.restore(&format!("layer{t}.router.weight"), &layer.router.weight)?;
            ckpt.restore(&format!("layer{t}.router.bias"), &layer.router.bias)?;
            for (i, expert) in layer.experts.iter().enumerate() {
                for (j, p) in expert.params().iter().enumerate() {
                    ckpt.restore(&format!("layer{t}.expert{i}.p{j}"), p)?;
                }
            }
        }
        for (t, dynamics_layer) in model.stack.dynamics.iter().enumerate() {
            for (j, p) in dynamics_layer.params().iter().enumerate() {
                ckpt.restore(&format!("layer{t}.dynamics.p{j}"), p)?;
            }
        }
        ckpt.restore("head.weight", &model.head_weight)?;
        ckpt.restore("head.bias", &model.head_bias)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use momoe_core::model::ExpertKind;

    fn small_cfg() -> LmConfig {
        LmConfig {
            vocab: 16,
            seq_len: 12,
            train_sequences: 8,
            valid_sequences: 4,
            pattern_strength: 0.8,
        }
    }

    fn small_shape() -> ModelShape {
        ModelShape {
            layers: 2,
            width: 8,
            experts: 4,
            experts_per_token: 2,
            expert_kind: ExpertKind::Perceptron,
            hidden_multiplier: 2,
        }
    }

    #[test]
    fn corpus_is_seeded_and_in_range() {
        let cfg = small_cfg();
        let a = build_corpus(&cfg, 3).unwrap();
        let b = build_corpus(&cfg, 3).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.valid, b.valid);
        for tok in a.train_tokens() {
            assert!(tok >= 1 && (tok as usize) < cfg.vocab);
        }
        let c = build_corpus(&cfg, 4).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn corruption_rates_zero_and_one() {
        let cfg = small_cfg();
        let corpus = build_corpus(&cfg, 3).unwrap();
        let untouched = corrupt_tokens(&corpus.valid, 0.0, 0, 9).unwrap();
        assert_eq!(untouched, corpus.valid);
        let all = corrupt_tokens(&corpus.valid, 1.0, 0, 9).unwrap();
        assert!(all.iter().flatten().all(|&t| t == 0));
    }

    #[test]
    fn corruption_count_is_binomial() {
        let sequences = vec![vec![5u32; 10_000]];
        let corrupted = corrupt_tokens(&sequences, 0.1, 0, 11).unwrap();
        let swapped = corrupted[0].iter().filter(|&&t| t == 0).count();
        // 3-sigma band around 1000 for Binomial(10^4, 0.1).
        assert!((910..=1090).contains(&swapped), "swapped {swapped}");
    }

    #[test]
    fn unigram_entropy_of_uniform_stream_is_log_support() {
        let corpus = TinyCorpus {
            train: vec![(1..=15u32).collect::<Vec<_>>()],
            valid: vec![],
            vocab: 16,
        };
        let h = unigram_entropy(&corpus);
        assert!((h - (15.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn model_round_trips_through_checkpoint() {
        let shape = small_shape();
        let dynamics = DynamicsConfig::default();
        let model = TinyLm::build(16, &shape, &dynamics, 5).unwrap();
        let ckpt = model.to_checkpoint(serde_json::Value::Null).unwrap();
        let restored = TinyLm::from_checkpoint(&ckpt, 16, &shape, &dynamics).unwrap();
        for t in 0..16u32 {
            let a = model.logits(t).unwrap().to_vec();
            let b = restored.logits(t).unwrap().to_vec();
            assert_eq!(a, b, "logits differ at token {t}");
        }
    }

    #[test]
    fn loss_is_finite_and_positive() {
        let model = TinyLm::build(16, &small_shape(), &DynamicsConfig::default(), 5).unwrap();
        let loss = model.batch_loss(&[(1, 2), (3, 4), (5, 6)]).unwrap();
        assert!(loss.value().is_finite());
        assert!(loss.value() > 0.0);
    }
}
