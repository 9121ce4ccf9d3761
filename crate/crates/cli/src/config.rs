//! Experiment configuration: a single TOML file fully determines a run.
//!
//! Determinism contract: the seed fixes corpus generation, parameter
//! initialization, batch order, and corruption draws. Streams are derived
//! from the master seed with fixed offsets, in this order:
//!
//! | stream            | seed       |
//! |-------------------|------------|
//! | data / objectives | `seed`     |
//! | initialization    | `seed + 1` |
//! | batch shuffling   | `seed + 2` |
//! | corruption        | `seed + 3` |
//! | diagnostics batch | `seed + 4` |
//!
//! Unknown fields are rejected so typos surface as schema errors naming the
//! field.

use std::path::{Path, PathBuf};

use momoe_core::dynamics::DynamicsConfig;
use momoe_core::model::ModelShape;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Synthetic quadratic objectives with gradient-field experts.
    QuadraticMultiobj,
    /// Seeded Markov corpus with a next-token model.
    TinyLm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Transitions per optimizer update.
    pub batch_size: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            optimizer: OptimizerKind::Adamw,
            learning_rate: 3e-3,
            weight_decay: 0.0,
            epochs: 5,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub vocab: usize,
    pub seq_len: usize,
    pub train_sequences: usize,
    pub valid_sequences: usize,
    /// Probability of the dominant successor in the generated chain.
    pub pattern_strength: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab: 128,
            seq_len: 33,
            train_sequences: 64,
            valid_sequences: 16,
            pattern_strength: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Per-token probability of replacement by the sentinel at eval time.
    pub swap_rate: f64,
    pub sentinel_id: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            swap_rate: 0.1,
            sentinel_id: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadraticConfig {
    pub objectives: usize,
    pub dim: usize,
    pub min_curvature: f64,
    pub max_curvature: f64,
    /// Layers-as-iterations to unroll per start.
    pub unroll_steps: usize,
    pub starts: usize,
}

impl Default for QuadraticConfig {
    fn default() -> Self {
        QuadraticConfig {
            objectives: 4,
            dim: 8,
            min_curvature: 0.1,
            max_curvature: 1.0,
            unroll_steps: 40,
            starts: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelShape,
    pub dynamics: DynamicsConfig,
    pub trainer: TrainerConfig,
    pub lm: LmConfig,
    pub eval: EvalConfig,
    pub quadratic: QuadraticConfig,
    /// Collect dense diagnostics every N epochs (0 disables).
    pub diagnostics_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskKind::TinyLm,
            seed: 7,
            output_dir: PathBuf::from("run"),
            model: ModelShape::default(),
            dynamics: DynamicsConfig::default(),
            trainer: TrainerConfig::default(),
            lm: LmConfig::default(),
            eval: EvalConfig::default(),
            quadratic: QuadraticConfig::default(),
            diagnostics_every: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> anyhow::Result<ExperimentConfig> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.dynamics.validate()?;
        if self.lm.vocab < 2 || self.lm.vocab > 256 {
            anyhow::bail!("lm.vocab must lie in 2..=256, got {}", self.lm.vocab);
        }
        if self.lm.seq_len < 2 || self.lm.seq_len > 64 {
            anyhow::bail!("lm.seq_len must lie in 2..=64, got {}", self.lm.seq_len);
        }
        if !(0.0..=1.0).contains(&self.eval.swap_rate) {
            anyhow::bail!("eval.swap_rate must lie in [0,1], got {}", self.eval.swap_rate);
        }
        if u64::from(self.eval.sentinel_id) >= self.lm.vocab as u64 {
            anyhow::bail!(
                "eval.sentinel_id {} outside vocab {}",
                self.eval.sentinel_id,
                self.lm.vocab
            );
        }
        if self.trainer.batch_size == 0 {
            anyhow::bail!("trainer.batch_size must be positive");
        }
        if self.quadratic.objectives < 1 || self.quadratic.dim < 1 {
            anyhow::bail!("quadratic task needs at least one objective and dimension");
        }
        Ok(())
    }

    /// Canonical serialized form; the hash of this string tags every output
    /// file so artifacts can be traced back to their configuration.
    pub fn canonical_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn content_hash(&self) -> String {
        fnv1a_hex(self.canonical_string().as_bytes())
    }

    pub fn seeds(&self) -> SeedPlan {
        SeedPlan {
            data: self.seed,
            init: self.seed + 1,
            shuffle: self.seed + 2,
            corrupt: self.seed + 3,
            diagnostics: self.seed + 4,
        }
    }
}

/// Derived RNG seeds, in documented draw order.
#[derive(Debug, Clone, Copy)]
pub struct SeedPlan {
    pub data: u64,
    pub init: u64,
    pub shuffle: u64,
    pub corrupt: u64,
    pub diagnostics: u64,
}

/// FNV-1a, 64-bit, rendered as hex. Stable across platforms and runs.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

/// Resolve an output path against the `MOMOE_OUT_DIR` environment variable
/// (absolute paths pass through).
pub fn resolve_output_dir(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("MOMOE_OUT_DIR") {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let s = cfg.canonical_string();
        let parsed: ExperimentConfig = toml::from_str(&s).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_field_is_named_in_the_error() {
        let err = toml::from_str::<ExperimentConfig>("rate_of_swap = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("rate_of_swap"), "{err}");
    }

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        assert_eq!(a.content_hash(), b.content_hash());
        b.seed = 8;
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn validation_names_bad_fields() {
        let mut cfg = ExperimentConfig::default();
        cfg.eval.swap_rate = 1.5;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("swap_rate"), "{err}");

        let mut cfg = ExperimentConfig::default();
        cfg.lm.vocab = 512;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("vocab"), "{err}");
    }
}
