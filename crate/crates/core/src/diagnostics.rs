//! Empirical instruments: norm-ordered expert-load histograms and per-layer
//! output-norm traces.
//!
//! The load histogram answers "how often does routing pick the expert with
//! the r-th largest output norm?" — rank is recomputed per token from the
//! norms of *all* expert outputs (dense evaluation), while the forward pass
//! itself stays sparse and untouched.

use crate::error::{Error, Result};
use crate::model::MoeStack;
use crate::moe::RouterDecision;
use crate::tensor::Tensor;

/// Selection counts bucketed by expert-output-norm rank (0 = largest norm).
#[derive(Debug, Clone)]
pub struct LoadHistogram {
    counts: Vec<u64>,
}

impl LoadHistogram {
    pub fn new(experts: usize) -> LoadHistogram {
        LoadHistogram {
            counts: vec![0; experts],
        }
    }

    pub fn experts(&self) -> usize {
        self.counts.len()
    }

    pub fn total_selections(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Proportion of selections per norm rank; sums to 1.
    pub fn proportions(&self) -> Vec<f64> {
        let total = self.total_selections();
        if total == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts
            .iter()
            .map(|&c| c as f64 / total as f64)
            .collect()
    }

    /// Merge a worker's histogram; pure addition, order-independent.
    pub fn merge(&mut self, other: &LoadHistogram) {
        assert_eq!(self.counts.len(), other.counts.len());
        for (a, b) in self.counts.iter_mut().zip(other.counts.iter()) {
            *a += b;
        }
    }
}

/// Ranks of each expert by descending output norm; ties keep the lower index
/// first, mirroring the routing tie rule.
pub fn norm_ranks(per_expert_norms: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..per_expert_norms.len()).collect();
    order.sort_by(|&a, &b| {
        per_expert_norms[b]
            .partial_cmp(&per_expert_norms[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut ranks = vec![0; per_expert_norms.len()];
    for (rank, &expert) in order.iter().enumerate() {
        ranks[expert] = rank;
    }
    ranks
}

/// Record one token's routing decision against the dense per-expert norms.
pub fn record_selection(
    histogram: &mut LoadHistogram,
    decision: &RouterDecision,
    per_expert_norms: &[f64],
) -> Result<()> {
    if per_expert_norms.len() != histogram.experts() {
        return Err(Error::contract(format!(
            "{} norms for a {}-expert histogram",
            per_expert_norms.len(),
            histogram.experts()
        )));
    }
    let ranks = norm_ranks(per_expert_norms);
    for &expert in &decision.selected {
        histogram.counts[ranks[expert]] += 1;
    }
    Ok(())
}

/// Total-variation distance of the rank proportions to the uniform vector;
/// 0 is perfectly norm-balanced selection. Comparable only across equal
/// expert counts.
pub fn flatness_score(histogram: &LoadHistogram) -> f64 {
    let e = histogram.experts() as f64;
    histogram
        .proportions()
        .iter()
        .map(|p| (p - 1.0 / e).abs())
        .sum::<f64>()
        / 2.0
}

/// One row of the per-layer output-norm trace.
#[derive(Debug, Clone, PartialEq)]
pub struct NormTraceRow {
    pub layer: usize,
    /// Caller-supplied tag (epoch, step, checkpoint id).
    pub checkpoint: String,
    pub mean_output_norm: f64,
}

/// Mean layer-output norm per layer over a batch, tagged with a checkpoint
/// label.
pub fn record_norms(
    stack: &MoeStack,
    batch: &[Vec<f64>],
    checkpoint: &str,
) -> Result<Vec<NormTraceRow>> {
    if batch.is_empty() {
        return Err(Error::DegenerateInput("record_norms over empty batch".into()));
    }
    let mut sums = vec![0.0; stack.depth()];
    for x in batch {
        let input = Tensor::vector(x.clone())?;
        let (_, trace) = stack.forward(&input)?;
        for (s, n) in sums.iter_mut().zip(trace.output_norms.iter()) {
            *s += n;
        }
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(layer, s)| NormTraceRow {
            layer,
            checkpoint: checkpoint.to_string(),
            mean_output_norm: s / batch.len() as f64,
        })
        .collect())
}

/// Dense diagnostics for a stack on a batch: per-layer load histograms plus
/// the norm trace, without perturbing the sparse forward results.
pub fn collect_layer_diagnostics(
    stack: &MoeStack,
    batch: &[Vec<f64>],
    checkpoint: &str,
) -> Result<(Vec<LoadHistogram>, Vec<NormTraceRow>)> {
    let experts = stack
        .layers
        .first()
        .map(|l| l.expert_count())
        .unwrap_or(0);
    let mut histograms: Vec<LoadHistogram> =
        (0..stack.depth()).map(|_| LoadHistogram::new(experts)).collect();
    let mut sums = vec![0.0; stack.depth()];
    for x in batch {
        let input = Tensor::vector(x.clone())?;
        let (_, trace) = stack.forward(&input)?;
        for (t, layer_out) in trace.layer_outputs.iter().enumerate() {
            // Rank all experts at the point the layer actually evaluated.
            let norms = stack.layers[t].expert_output_norms(&layer_out.input)?;
            record_selection(&mut histograms[t], &layer_out.decision, &norms)?;
            sums[t] += trace.output_norms[t];
        }
    }
    let rows = sums
        .into_iter()
        .enumerate()
        .map(|(layer, s)| NormTraceRow {
            layer,
            checkpoint: checkpoint.to_string(),
            mean_output_norm: s / batch.len() as f64,
        })
        .collect();
    Ok((histograms, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn decision(selected: Vec<usize>, experts: usize) -> RouterDecision {
        let mut w = vec![0.0; experts];
        let share = 1.0 / selected.len() as f64;
        for &i in &selected {
            w[i] = share;
        }
        RouterDecision {
            scores: Tensor::vector(vec![0.0; experts]).unwrap(),
            selected,
            weights: Tensor::vector(w).unwrap(),
        }
    }

    #[test]
    fn always_largest_norm_gives_one_hot_histogram() {
        let mut h = LoadHistogram::new(2);
        for _ in 0..50 {
            // Expert 1 has the larger norm and is always picked.
            record_selection(&mut h, &decision(vec![1], 2), &[0.3, 2.0]).unwrap();
        }
        assert_eq!(h.proportions(), vec![1.0, 0.0]);
    }

    #[test]
    fn full_selection_spreads_over_all_ranks() {
        let mut h = LoadHistogram::new(4);
        record_selection(&mut h, &decision(vec![0, 1, 2, 3], 4), &[0.1, 0.4, 0.2, 0.9]).unwrap();
        assert_eq!(h.proportions(), vec![0.25; 4]);
    }

    #[test]
    fn counts_equal_tokens_times_k() {
        let mut h = LoadHistogram::new(5);
        for t in 0..37 {
            let norms: Vec<f64> = (0..5).map(|i| ((i * 7 + t) % 11) as f64).collect();
            record_selection(&mut h, &decision(vec![t % 5, (t + 2) % 5], 5), &norms).unwrap();
        }
        assert_eq!(h.total_selections(), 37 * 2);
    }

    #[test]
    fn flatness_reference_values() {
        let mut uniform = LoadHistogram::new(4);
        record_selection(&mut uniform, &decision(vec![0, 1, 2, 3], 4), &[4.0, 3.0, 2.0, 1.0])
            .unwrap();
        assert!(flatness_score(&uniform) < 1e-15);

        let mut one_hot = LoadHistogram::new(4);
        record_selection(&mut one_hot, &decision(vec![0], 4), &[4.0, 3.0, 2.0, 1.0]).unwrap();
        assert!((flatness_score(&one_hot) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn norm_rank_tie_break_is_stable() {
        assert_eq!(norm_ranks(&[1.0, 1.0, 0.5]), vec![0, 1, 2]);
        assert_eq!(norm_ranks(&[0.5, 1.0, 1.0]), vec![2, 0, 1]);
    }

    #[test]
    fn merge_is_addition() {
        let mut a = LoadHistogram::new(3);
        let mut b = LoadHistogram::new(3);
        record_selection(&mut a, &decision(vec![0], 3), &[3.0, 2.0, 1.0]).unwrap();
        record_selection(&mut b, &decision(vec![2], 3), &[3.0, 2.0, 1.0]).unwrap();
        a.merge(&b);
        assert_eq!(a.counts(), &[1, 0, 1]);
        assert_eq!(a.total_selections(), 2);
    }

    #[test]
    fn uniform_random_selection_approaches_uniform_histogram() {
        use rand::seq::index::sample;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let experts = 8;
        let k = 2;
        let mut h = LoadHistogram::new(experts);
        for _ in 0..100_000 {
            let norms: Vec<f64> = (0..experts).map(|_| rng.random_range(0.0..1.0)).collect();
            let selected: Vec<usize> = sample(&mut rng, experts, k).into_vec();
            record_selection(&mut h, &decision(selected, experts), &norms).unwrap();
        }
        assert!(flatness_score(&h) < 0.02, "tv {}", flatness_score(&h));
    }
}
