//! Thin command implementations behind the CLI surface.

use std::path::Path;

use momoe_core::checkpoint::Checkpoint;
use momoe_core::diagnostics::{collect_layer_diagnostics, flatness_score};
use momoe_core::mgda::{
    brute_force_min_norm, min_norm_point, satisfies_common_descent, ObjectiveSet,
};
use momoe_core::stability::{region_sweep, GridAxis, SimulationConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::fnv1a_hex;
use crate::csvio::{CsvWriter, Field};
use crate::tasks::tiny_lm::TinyLm;

/// Stability sweep over the `(momentum, effective step)` grid, written as
/// `mu,gamma_sigma,lambda1_re,lambda1_im,lambda2_re,lambda2_im,spectral_radius,analytic,empirical`.
pub struct SweepArgs {
    pub momentum_axis: GridAxis,
    pub step_axis: GridAxis,
    pub sim: SimulationConfig,
}

pub struct SweepOutcome {
    pub cells: usize,
    pub judged_cells: usize,
    pub analytic_spectral_agreement: f64,
    pub analytic_empirical_agreement: f64,
    /// Stable measure at momentum 0.9 over stable measure at momentum 0,
    /// when both rows exist on the grid.
    pub margin_ratio: Option<f64>,
}

pub fn sweep_stability(args: &SweepArgs, out_path: &Path) -> anyhow::Result<SweepOutcome> {
    let tag = fnv1a_hex(
        format!(
            "sweep:{}:{}:{}:{}:{}:{}:{}",
            args.momentum_axis.start,
            args.momentum_axis.step,
            args.momentum_axis.count,
            args.step_axis.start,
            args.step_axis.step,
            args.step_axis.count,
            args.sim.steps
        )
        .as_bytes(),
    );
    let sweep = region_sweep(&args.momentum_axis, &args.step_axis, &args.sim);
    let mut csv = CsvWriter::create(
        out_path,
        &tag,
        "mu,gamma_sigma,lambda1_re,lambda1_im,lambda2_re,lambda2_im,spectral_radius,analytic,empirical",
    )?;
    for v in &sweep.verdicts {
        csv.row(&[
            Field::Float(v.momentum),
            Field::Float(v.effective_step),
            Field::Float(v.eigenvalues.0.re),
            Field::Float(v.eigenvalues.0.im),
            Field::Float(v.eigenvalues.1.re),
            Field::Float(v.eigenvalues.1.im),
            Field::Float(v.spectral_radius),
            Field::Bool(v.analytic_stable),
            Field::Bool(v.empirical_stable),
        ])?;
    }
    csv.finish()?;

    let row_of = |target: f64| -> Option<usize> {
        (0..args.momentum_axis.count)
            .find(|&i| (args.momentum_axis.at(i) - target).abs() < args.momentum_axis.step / 4.0)
    };
    let margin_ratio = match (row_of(0.9), row_of(0.0)) {
        (Some(hi), Some(lo)) => {
            let hi_measure =
                sweep.stable_measure_at(&args.momentum_axis, hi, args.step_axis.step);
            let lo_measure =
                sweep.stable_measure_at(&args.momentum_axis, lo, args.step_axis.step);
            (lo_measure > 0.0).then(|| hi_measure / lo_measure)
        }
        _ => None,
    };
    Ok(SweepOutcome {
        cells: sweep.verdicts.len(),
        judged_cells: sweep.judged_cells,
        analytic_spectral_agreement: sweep.analytic_spectral_agreement(),
        analytic_empirical_agreement: sweep.analytic_empirical_agreement(),
        margin_ratio,
    })
}

/// Self-checks of the min-norm machinery, written as
/// `check,value,threshold,pass`.
pub fn verify_mgda(seed: u64, out_path: &Path) -> anyhow::Result<bool> {
    let tag = fnv1a_hex(format!("verify-mgda:{seed}").as_bytes());
    let mut csv = CsvWriter::create(out_path, &tag, "check,value,threshold,pass")?;
    let mut all_pass = true;
    let mut emit = |csv: &mut CsvWriter, name: &str, value: f64, threshold: f64| {
        let pass = value <= threshold;
        all_pass &= pass;
        csv.row(&[
            Field::Str(name.into()),
            Field::Float(value),
            Field::Float(threshold),
            Field::Bool(pass),
        ])
        .expect("csv row");
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Opposing unit vectors: exact stationarity configuration.
    let opposing = min_norm_point(&[vec![1.0, 0.0], vec![-1.0, 0.0]])?;
    emit(&mut csv, "opposing_pair_norm", opposing.norm, 1e-10);

    // Orthogonal pair: norm 1/sqrt(2).
    let orth = min_norm_point(&[vec![1.0, 0.0], vec![0.0, 1.0]])?;
    emit(
        &mut csv,
        "orthogonal_pair_error",
        (orth.norm - 1.0 / 2.0_f64.sqrt()).abs(),
        1e-9,
    );

    // Random hulls vs the exhaustive grid, and the common-descent property.
    for &(e, n, resolution) in &[(2usize, 4usize, 2000usize), (3, 6, 400), (4, 8, 160)] {
        let vectors: Vec<Vec<f64>> = (0..e)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let sol = min_norm_point(&vectors)?;
        let (_, grid_norm) = brute_force_min_norm(&vectors, resolution);
        emit(
            &mut csv,
            &format!("grid_agreement_e{e}"),
            (sol.norm - grid_norm).abs(),
            3.0 / resolution as f64,
        );
        let descent_ok = satisfies_common_descent(&sol, &vectors, 1e-9);
        emit(
            &mut csv,
            &format!("common_descent_e{e}"),
            if descent_ok { 0.0 } else { 1.0 },
            0.5,
        );
    }

    // Pareto-stationary segment of the two-quadratic instance.
    let identity = |dim: usize| {
        let mut h = vec![0.0; dim * dim];
        for i in 0..dim {
            h[i * dim + i] = 1.0;
        }
        h
    };
    let obj = ObjectiveSet::new(
        vec![identity(2), identity(2)],
        vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
    )?;
    let grads = obj.gradients(&[0.25, 0.0]);
    let seg = min_norm_point(&grads)?;
    emit(&mut csv, "segment_stationarity_norm", seg.norm, 1e-10);

    csv.finish()?;
    Ok(all_pass)
}

pub struct DiagnoseReport {
    pub layers: usize,
    pub flatness: Vec<f64>,
}

/// Load a checkpointed model, run a seeded token batch through it, and emit
/// `diagnostics_load.csv` + `norms.csv` into the output directory.
pub fn diagnose(
    checkpoint_path: &Path,
    seed: u64,
    tokens: usize,
    out_dir: &Path,
) -> anyhow::Result<DiagnoseReport> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let meta = &ckpt.meta;
    let vocab = meta
        .get("vocab")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| anyhow::anyhow!("checkpoint meta lacks 'vocab'"))?
        as usize;
    let shape: momoe_core::model::ModelShape = serde_json::from_value(
        meta.get("model")
            .cloned()
            .ok_or_else(|| anyhow::anyhow!("checkpoint meta lacks 'model'"))?,
    )?;
    let dynamics: momoe_core::dynamics::DynamicsConfig = serde_json::from_value(
        meta.get("dynamics")
            .cloned()
            .ok_or_else(|| anyhow::anyhow!("checkpoint meta lacks 'dynamics'"))?,
    )?;
    let hash = meta
        .get("config_hash")
        .and_then(|v| v.as_str())
        .unwrap_or("unknown")
        .to_string();
    let model = TinyLm::from_checkpoint(&ckpt, vocab, &shape, &dynamics)?;

    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let token_batch: Vec<u32> = (0..tokens)
        .map(|_| rng.random_range(1..vocab as u32))
        .collect();
    let batch = model.embedded_batch(&token_batch)?;
    let (histograms, norm_rows) = collect_layer_diagnostics(&model.stack, &batch, "diagnose")?;

    let mut load_csv = CsvWriter::create(
        &out_dir.join("diagnostics_load.csv"),
        &hash,
        "layer,rank,proportion",
    )?;
    let mut flatness = Vec::new();
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
    load_csv.finish()?;

    let mut norms_csv = CsvWriter::create(
        &out_dir.join("norms.csv"),
        &hash,
        "layer,checkpoint,mean_output_norm",
    )?;
    for row in norm_rows {
        norms_csv.row(&[
            Field::UInt(row.layer as u64),
            Field::Str(row.checkpoint),
            Field::Float(row.mean_output_norm),
        ])?;
    }
    norms_csv.finish()?;

    Ok(DiagnoseReport {
        layers: histograms.len(),
        flatness,
    })
}
