//! Assessment harness that ranks items by societal impact with pluggable
//! chat backends, scores predictions against survey-derived ground truth,
//! and measures robustness to position, wording, and verbosity prompt
//! perturbations.
//!
//! The crate is organized around the experiment pipeline:
//!
//! - [`domain`]: datasets, ground truth, rankings, experiment config
//! - [`metrics`]: Spearman / Kendall / nDCG, averaging, significance
//! - [`perturb`]: position, wording, and verbosity bias suites
//! - [`backend`]: HTTP and simulated chat backends with transcripts
//! - [`strategies`]: the six assessment strategy engines
//! - [`harness`]: the experiment grid, run records, and reports

pub mod backend;
pub mod domain;
pub mod metrics;
pub mod perturb;
pub mod strategies;

pub mod harness;

pub use domain::{
    derive_ground_truth, load_dataset, validate_ranking, ConspiracyTheory, Dataset, DomainError,
    ExperimentConfig, GroundTruth, ItemId, PairwiseOrderMode, Provenance, Ranking, RankingVerdict,
    VariantKind,
};
pub use metrics::{
    bias_delta, kendall, mean_metrics, metric_value, ndcg, significance, significance_stars,
    spearman, MetricDelta, MetricError, MetricValue, SignificanceResult, StatKind,
};
