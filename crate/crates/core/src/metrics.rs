//! Rank-quality metrics over strict permutations: Spearman correlation,
//! Kendall concordance, and normalized discounted cumulative gain with
//! `rel(i) = 1/rank_i`, plus repetition averaging, Monte-Carlo permutation
//! significance, and per-component bias deltas.
//!
//! Inputs are always permutations (no ties), so the tie-corrected variants
//! of these statistics are deliberately not implemented.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{GroundTruth, ItemId, Ranking};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("prediction is not a permutation of the ground-truth ids: {0}")]
    InvalidRanking(String),
    #[error("cannot aggregate an empty list of metric values")]
    EmptyList,
    #[error("significance needs at least 1000 resamples, got {0}")]
    TooFewResamples(u32),
}

/// The three headline metrics for one ranking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    #[serde(rename = "r_s")]
    pub spearman: f64,
    #[serde(rename = "tau")]
    pub kendall: f64,
    pub ndcg: f64,
}

/// Component-wise difference between a perturbed and a baseline measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    #[serde(rename = "delta_r_s")]
    pub spearman: f64,
    #[serde(rename = "delta_tau")]
    pub kendall: f64,
    #[serde(rename = "delta_ndcg")]
    pub ndcg: f64,
}

/// Which statistic a significance test was run on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatKind {
    Spearman,
    Kendall,
}

/// Result of a Monte-Carlo permutation test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub p_value: f64,
    pub resamples: u32,
    pub statistic: StatKind,
}

/// Paired (prediction rank, truth rank) vectors aligned by item, after
/// checking the prediction is a permutation of the truth's ids.
fn paired_ranks(pred: &Ranking, truth: &GroundTruth) -> Result<Vec<(f64, f64)>, MetricError> {
    let n = truth.n();
    if pred.ordered.len() != n {
        return Err(MetricError::InvalidRanking(format!(
            "{} predicted ids, {} expected",
            pred.ordered.len(),
            n
        )));
    }
    let mut pairs = Vec::with_capacity(n);
    for (id, truth_rank) in &truth.ranks {
        match pred.rank_of(*id) {
            Some(pred_rank) => pairs.push((pred_rank as f64, *truth_rank as f64)),
            None => {
                return Err(MetricError::InvalidRanking(format!("missing id {id}")));
            }
        }
    }
    // Same length and every truth id present once implies a permutation,
    // unless the prediction repeats an id.
    let mut seen = std::collections::BTreeSet::new();
    for id in &pred.ordered {
        if !seen.insert(*id) {
            return Err(MetricError::InvalidRanking(format!("duplicate id {id}")));
        }
    }
    Ok(pairs)
}

/// Spearman rank correlation: `1 - 6*sum(d_i^2) / (n(n^2-1))`.
pub fn spearman(pred: &Ranking, truth: &GroundTruth) -> Result<f64, MetricError> {
    let pairs = paired_ranks(pred, truth)?;
    let n = pairs.len() as f64;
    let sum_d2: f64 = pairs.iter().map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(1.0 - 6.0 * sum_d2 / (n * (n * n - 1.0)))
}

/// Kendall rank correlation: `(C - D) / (n(n-1)/2)` over all unordered
/// item pairs.
pub fn kendall(pred: &Ranking, truth: &GroundTruth) -> Result<f64, MetricError> {
    let pairs = paired_ranks(pred, truth)?;
    let n = pairs.len();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let dp = pairs[i].0 - pairs[j].0;
            let dt = pairs[i].1 - pairs[j].1;
            if dp * dt > 0.0 {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let total = (n * (n - 1) / 2) as f64;
    Ok((concordant - discordant) as f64 / total)
}

/// Normalized DCG with relevance `1 / truth_rank` and log2 position
/// discounts; the ideal DCG comes from the ground-truth ordering.
pub fn ndcg(pred: &Ranking, truth: &GroundTruth) -> Result<f64, MetricError> {
    paired_ranks(pred, truth)?;
    let n = truth.n();
    let dcg: f64 = pred
        .ordered
        .iter()
        .enumerate()
        .map(|(pos, id)| {
            let rel = 1.0 / truth.rank_of(*id).expect("validated above") as f64;
            rel / ((pos + 2) as f64).log2()
        })
        .sum();
    let idcg: f64 = (1..=n)
        .map(|rank| (1.0 / rank as f64) / ((rank + 1) as f64).log2())
        .sum();
    Ok(dcg / idcg)
}

/// All three metrics for one prediction.
pub fn metric_value(pred: &Ranking, truth: &GroundTruth) -> Result<MetricValue, MetricError> {
    Ok(MetricValue {
        spearman: spearman(pred, truth)?,
        kendall: kendall(pred, truth)?,
        ndcg: ndcg(pred, truth)?,
    })
}

/// Component-wise arithmetic mean across repetitions.
pub fn mean_metrics(values: &[MetricValue]) -> Result<MetricValue, MetricError> {
    if values.is_empty() {
        return Err(MetricError::EmptyList);
    }
    let n = values.len() as f64;
    Ok(MetricValue {
        spearman: values.iter().map(|v| v.spearman).sum::<f64>() / n,
        kendall: values.iter().map(|v| v.kendall).sum::<f64>() / n,
        ndcg: values.iter().map(|v| v.ndcg).sum::<f64>() / n,
    })
}

/// Perturbed minus baseline, per component.
pub fn bias_delta(perturbed: &MetricValue, baseline: &MetricValue) -> MetricDelta {
    MetricDelta {
        spearman: perturbed.spearman - baseline.spearman,
        kendall: perturbed.kendall - baseline.kendall,
        ndcg: perturbed.ndcg - baseline.ndcg,
    }
}

/// Two-sided Monte-Carlo permutation test: the smoothed fraction
/// `(b + 1) / (m + 1)` of uniformly random predictions whose |statistic|
/// is at least the observed |statistic|. Deterministic for a fixed seed.
pub fn significance(
    pred: &Ranking,
    truth: &GroundTruth,
    statistic: StatKind,
    resamples: u32,
    seed: u64,
) -> Result<SignificanceResult, MetricError> {
    if resamples < 1000 {
        return Err(MetricError::TooFewResamples(resamples));
    }
    let stat_fn = match statistic {
        StatKind::Spearman => spearman,
        StatKind::Kendall => kendall,
    };
    let observed = stat_fn(pred, truth)?.abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<ItemId> = truth.ids();
    let mut at_least = 0u64;
    for _ in 0..resamples {
        ids.shuffle(&mut rng);
        let sample = Ranking::new(ids.clone());
        let s = stat_fn(&sample, truth).expect("shuffled permutation is valid");
        if s.abs() >= observed - 1e-12 {
            at_least += 1;
        }
    }
    Ok(SignificanceResult {
        p_value: (at_least + 1) as f64 / (resamples as u64 + 1) as f64,
        resamples,
        statistic,
    })
}

/// Table-style significance stars: `***` below 0.001, `**` below 0.01,
/// `*` below 0.05, empty otherwise.
pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}
