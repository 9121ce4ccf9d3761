//! Experiment runner: one config in, a directory of metric files out.
//!
//! Outputs (all CSVs carry a `# config_hash=` comment then a header row):
//!
//! * tiny LM task: `loss.csv` (per-update training loss), `eval.csv`
//!   (per-epoch validation cross-entropy, final corrupted cross-entropy,
//!   unigram baseline), `norms.csv` (per-layer mean output norm per epoch),
//!   `diagnostics_load.csv` (norm-ranked expert load), `checkpoint.json`,
//!   `summary.json`.
//! * quadratic task: `trajectory.csv` (per-start descent trace),
//!   `oracle_compare.csv` (layer-vs-oracle divergence), `acceleration.csv`
//!   (tuned heavy-ball vs tuned plain descent iterations), `summary.json`.
//!
//! Divergence (non-finite loss or state) aborts the run with a report naming
//! the layer and step; the binary maps it to a nonzero exit code.

use std::path::{Path, PathBuf};

use momoe_core::diagnostics::{collect_layer_diagnostics, flatness_score};
use momoe_core::error::Error;
use momoe_core::trainer::{AdamW, Sgd};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ExperimentConfig, OptimizerKind, TaskKind};
use crate::csvio::{CsvWriter, Field};
use crate::tasks::quadratic::{
    acceleration_comparison, build_quadratic_task, oracle_substitution_divergence,
    unroll_dynamics,
};
use crate::tasks::tiny_lm::{build_corpus, corrupt_tokens, unigram_entropy, TinyLm};

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub task: String,
    pub config_hash: String,
    pub final_train_loss: Option<f64>,
    pub final_valid_ce: Option<f64>,
    pub corrupted_ce: Option<f64>,
    pub unigram_baseline: Option<f64>,
    pub heavy_ball_iterations: Option<usize>,
    pub plain_iterations: Option<usize>,
    pub oracle_max_divergence: Option<f64>,
    pub load_flatness: Option<Vec<f64>>,
    #[serde(skip)]
    pub output_dir: PathBuf,
}

pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> anyhow::Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let hash = cfg.content_hash();
    let summary = match cfg.task {
        TaskKind::TinyLm => run_tiny_lm(cfg, out_dir, &hash)?,
        TaskKind::QuadraticMultiobj => run_quadratic(cfg, out_dir, &hash)?,
    };
    let json = serde_json::to_string_pretty(&summary)?;
    std::fs::write(out_dir.join("summary.json"), json)?;
    Ok(summary)
}

enum Optimizer {
    Sgd(Sgd),
    AdamW(AdamW),
}

impl Optimizer {
    fn step(&mut self, params: &[momoe_core::Tensor]) -> momoe_core::Result<()> {
        match self {
            Optimizer::Sgd(o) => o.step(params),
            Optimizer::AdamW(o) => o.step(params),
        }
    }
}

fn run_tiny_lm(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    hash: &str,
) -> anyhow::Result<RunSummary> {
    let seeds = cfg.seeds();
    let corpus = build_corpus(&cfg.lm, seeds.data)?;
    let baseline = unigram_entropy(&corpus);
    let model = TinyLm::build(cfg.lm.vocab, &cfg.model, &cfg.dynamics, seeds.init)?;
    let params = model.params();
    let mut optimizer = match cfg.trainer.optimizer {
        OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(cfg.trainer.learning_rate)),
        OptimizerKind::Adamw => Optimizer::AdamW(
            AdamW::new(cfg.trainer.learning_rate).with_weight_decay(cfg.trainer.weight_decay),
        ),
    };

    let mut loss_csv = CsvWriter::create(&out_dir.join("loss.csv"), hash, "epoch,step,loss")?;
    let mut eval_csv = CsvWriter::create(&out_dir.join("eval.csv"), hash, "epoch,split,value")?;
    let mut norms_csv = CsvWriter::create(
        &out_dir.join("norms.csv"),
        hash,
        "layer,checkpoint,mean_output_norm",
    )?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seeds.shuffle);
    let mut diag_rng = ChaCha8Rng::seed_from_u64(seeds.diagnostics);
    let mut step = 0usize;
    let mut last_loss = f64::NAN;
    let mut final_valid = f64::NAN;

    for epoch in 0..cfg.trainer.epochs {
        let mut order: Vec<usize> = (0..corpus.train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for &seq_idx in &order {
            let seq = &corpus.train[seq_idx];
            let transitions: Vec<(u32, u32)> =
                seq.windows(2).map(|w| (w[0], w[1])).collect();
            for batch in transitions.chunks(cfg.trainer.batch_size) {
                step += 1;
                let loss = model
                    .batch_loss(batch)
                    .map_err(|e| at_step(e, step))?;
                let value = loss.value();
                if !value.is_finite() {
                    return Err(Error::Divergence {
                        layer: cfg.model.layers,
                        step,
                    }
                    .into());
                }
                for p in &params {
                    p.zero_grad();
                }
                loss.backward().map_err(|e| at_step(e, step))?;
                optimizer.step(&params).map_err(|e| at_step(e, step))?;
                last_loss = value;
                loss_csv.row(&[
                    Field::UInt(epoch as u64),
                    Field::UInt(step as u64),
                    Field::Float(value),
                ])?;
            }
        }

        final_valid = model.evaluate(&corpus.valid)?;
        eval_csv.row(&[
            Field::UInt(epoch as u64),
            Field::Str("valid_clean".into()),
            Field::Float(final_valid),
        ])?;

        if cfg.diagnostics_every > 0 && (epoch + 1) % cfg.diagnostics_every == 0 {
            let tokens: Vec<u32> = (0..64)
                .map(|_| diag_rng.random_range(1..cfg.lm.vocab as u32))
                .collect();
            let batch = model.embedded_batch(&tokens)?;
            let rows =
                momoe_core::diagnostics::record_norms(&model.stack, &batch, &format!("epoch{epoch}"))?;
            for row in rows {
                norms_csv.row(&[
                    Field::UInt(row.layer as u64),
                    Field::Str(row.checkpoint),
                    Field::Float(row.mean_output_norm),
                ])?;
            }
        }
    }

    // Corruption evaluation on the held-out split.
    let corrupted = corrupt_tokens(
        &corpus.valid,
        cfg.eval.swap_rate,
        cfg.eval.sentinel_id,
        cfg.seeds().corrupt,
    )?;
    let corrupted_ce = model.evaluate(&corrupted)?;
    eval_csv.row(&[
        Field::UInt(cfg.trainer.epochs as u64),
        Field::Str("valid_corrupted".into()),
        Field::Float(corrupted_ce),
    ])?;
    eval_csv.row(&[
        Field::UInt(cfg.trainer.epochs as u64),
        Field::Str("unigram_baseline".into()),
        Field::Float(baseline),
    ])?;

    // Final dense diagnostics over the validation tokens.
    let valid_tokens: Vec<u32> = corpus.valid.iter().flatten().copied().collect();
    let batch = model.embedded_batch(&valid_tokens)?;
    let (histograms, _) = collect_layer_diagnostics(&model.stack, &batch, "final")?;
    let mut load_csv = CsvWriter::create(
        &out_dir.join("diagnostics_load.csv"),
        hash,
        "layer,rank,proportion",
    )?;
    let mut flatness = Vec::with_capacity(histograms.len());
    for (layer, hist) in histograms.iter().enumerate() {
        for (rank, p) in hist.proportions().iter().enumerate() {
            load_csv.row(&[
                Field::UInt(layer as u64),
                Field::UInt(rank as u64),
                Field::Float(*p),
            ])?;
        }
        flatness.push(flatness_score(hist));
    }

    let meta = serde_json::json!({
        "task": "tiny_lm",
        "vocab": cfg.lm.vocab,
        "model": cfg.model,
        "dynamics": cfg.dynamics,
        "config_hash": hash,
    });
    model.to_checkpoint(meta)?.save(&out_dir.join("checkpoint.json"))?;

    loss_csv.finish()?;
    eval_csv.finish()?;
    norms_csv.finish()?;
    load_csv.finish()?;

    Ok(RunSummary {
        task: "tiny_lm".into(),
        config_hash: hash.to_string(),
        final_train_loss: Some(last_loss),
        final_valid_ce: Some(final_valid),
        corrupted_ce: Some(corrupted_ce),
        unigram_baseline: Some(baseline),
        heavy_ball_iterations: None,
        plain_iterations: None,
        oracle_max_divergence: None,
        load_flatness: Some(flatness),
        output_dir: out_dir.to_path_buf(),
    })
}

fn at_step(e: Error, step: usize) -> anyhow::Error {
    match e {
        Error::Divergence { layer, .. } => Error::Divergence { layer, step }.into(),
        Error::NonFinite(what) => {
            anyhow::Error::from(Error::NonFinite(what)).context(format!("at step {step}"))
        }
        other => other.into(),
    }
}

fn run_quadratic(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    hash: &str,
) -> anyhow::Result<RunSummary> {
    let seeds = cfg.seeds();
    let task = build_quadratic_task(&cfg.quadratic, seeds.data)?;
    let mut start_rng = ChaCha8Rng::seed_from_u64(seeds.init);

    let mut trajectory_csv = CsvWriter::create(
        &out_dir.join("trajectory.csv"),
        hash,
        "start,step,mean_objective,stationarity_gap,iterate_norm",
    )?;
    let mut oracle_csv = CsvWriter::create(
        &out_dir.join("oracle_compare.csv"),
        hash,
        "start,max_abs_divergence",
    )?;

    let mut worst_divergence: f64 = 0.0;
    for start in 0..cfg.quadratic.starts {
        let x0: Vec<f64> = (0..cfg.quadratic.dim)
            .map(|_| start_rng.random_range(-1.5..1.5))
            .collect();
        for row in unroll_dynamics(&task, &cfg.dynamics, &x0, cfg.quadratic.unroll_steps)? {
            trajectory_csv.row(&[
                Field::UInt(start as u64),
                Field::UInt(row.step as u64),
                Field::Float(row.mean_objective),
                Field::Float(row.stationarity_gap),
                Field::Float(row.iterate_norm),
            ])?;
        }
        let divergence = oracle_substitution_divergence(
            &task,
            &x0,
            cfg.quadratic.unroll_steps,
            (cfg.dynamics.step_size * 0.3).min(0.5),
        )?;
        worst_divergence = worst_divergence.max(divergence);
        oracle_csv.row(&[Field::UInt(start as u64), Field::Float(divergence)])?;
    }

    let report = acceleration_comparison(100.0, 16, 1e-6, 100_000)?;
    let mut accel_csv =
        CsvWriter::create(&out_dir.join("acceleration.csv"), hash, "method,iterations")?;
    accel_csv.row(&[
        Field::Str("heavy_ball".into()),
        Field::UInt(report.heavy_ball_iterations as u64),
    ])?;
    accel_csv.row(&[
        Field::Str("plain".into()),
        Field::UInt(report.plain_iterations as u64),
    ])?;

    trajectory_csv.finish()?;
    oracle_csv.finish()?;
    accel_csv.finish()?;

    Ok(RunSummary {
        task: "quadratic_multiobj".into(),
        config_hash: hash.to_string(),
        final_train_loss: None,
        final_valid_ce: None,
        corrupted_ce: None,
        unigram_baseline: None,
        heavy_ball_iterations: Some(report.heavy_ball_iterations),
        plain_iterations: Some(report.plain_iterations),
        oracle_max_divergence: Some(worst_divergence),
        load_flatness: None,
        output_dir: out_dir.to_path_buf(),
    })
}
