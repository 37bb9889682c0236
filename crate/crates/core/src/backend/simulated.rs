//! Deterministic simulated agent: answers every task from hidden latent
//! scores plus configurable Gaussian jitter and an additive position bonus,
//! without reading any prompt text.
//!
//! With zero noise and zero position bias the agent is a perfect oracle:
//! setting latent scores to the belief percentages makes its rankings equal
//! the ground truth. The position-bias knob exists to reproduce on demand
//! the tendency to favor items listed earlier in the prompt.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    BackendError, ChatBackend, DecodeParams, PromptBundle, TaskAux, TaskDescriptor, TaskKind,
};
use crate::domain::{ItemId, VariantKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedAgentConfig {
    /// Hidden impact score per item id.
    pub latent_scores: BTreeMap<ItemId, f64>,
    /// Standard deviation of per-query Gaussian jitter; 0 disables it.
    pub noise_sigma: f64,
    /// Additive bonus proportional to how early an item appears in the
    /// presented list; 0 disables it.
    pub position_bias_strength: f64,
    pub seed: u64,
}

impl SimulatedAgentConfig {
    pub fn oracle(latent_scores: BTreeMap<ItemId, f64>, seed: u64) -> Self {
        Self {
            latent_scores,
            noise_sigma: 0.0,
            position_bias_strength: 0.0,
            seed,
        }
    }
}

pub struct SimulatedAgent {
    id: String,
    config: SimulatedAgentConfig,
    calls: AtomicU64,
}

impl SimulatedAgent {
    pub fn new(id: impl Into<String>, config: SimulatedAgentConfig) -> Self {
        Self {
            id: id.into(),
            config,
            calls: AtomicU64::new(0),
        }
    }
}

impl ChatBackend for SimulatedAgent {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(
        &self,
        bundle: &PromptBundle,
        _params: &DecodeParams,
    ) -> Result<String, BackendError> {
        let ordinal = self.calls.fetch_add(1, Ordering::SeqCst);
        simulated_complete(&self.config, &bundle.descriptor, ordinal)
    }
}

/// Perturbed score of the item at `idx` in a presented list of `n` items.
fn perturbed_score(
    config: &SimulatedAgentConfig,
    rng: &mut ChaCha8Rng,
    id: ItemId,
    idx: usize,
    n: usize,
) -> Result<f64, BackendError> {
    let latent = *config
        .latent_scores
        .get(&id)
        .ok_or(BackendError::UncoveredId(id))?;
    let noise = if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, config.noise_sigma).expect("finite sigma");
        normal.sample(rng)
    } else {
        0.0
    };
    let bonus = if n > 1 {
        config.position_bias_strength * (n - 1 - idx) as f64 / (n - 1) as f64
    } else {
        0.0
    };
    Ok(latent + noise + bonus)
}

fn scored_items(
    config: &SimulatedAgentConfig,
    rng: &mut ChaCha8Rng,
    item_ids: &[ItemId],
) -> Result<Vec<(ItemId, f64)>, BackendError> {
    item_ids
        .iter()
        .enumerate()
        .map(|(idx, id)| Ok((*id, perturbed_score(config, rng, *id, idx, item_ids.len())?)))
        .collect()
}

fn ranked_ids(mut scored: Vec<(ItemId, f64)>) -> Vec<ItemId> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().map(|(id, _)| id).collect()
}

fn bracketed(ids: &[ItemId]) -> String {
    let inner: Vec<String> = ids.iter().map(ToString::to_string).collect();
    format!("[{}]", inner.join(", "))
}

/// Concordant-minus-discordant pair count between two orderings of the same
/// id set; used by the simulated judge to measure agreement with its own
/// preference.
fn pair_agreement(candidate: &[ItemId], preference: &[ItemId]) -> i64 {
    let pos = |ids: &[ItemId], id: ItemId| ids.iter().position(|x| *x == id).unwrap_or(usize::MAX);
    let mut total = 0i64;
    for i in 0..preference.len() {
        for j in (i + 1)..preference.len() {
            let (a, b) = (preference[i], preference[j]);
            // Preference says a ranks above b.
            if pos(candidate, a) < pos(candidate, b) {
                total += 1;
            } else {
                total -= 1;
            }
        }
    }
    total
}

const RELEVANT_PAD: &str = "This belief has circulated widely across social media platforms, \
shaping how strongly communities react to related events and how much institutional trust \
erodes among its believers over time.";

const IRRELEVANT_PAD: &str = "Meanwhile, unrelated topics such as regional weather patterns, \
seasonal sports results, and newly opened restaurants continued to dominate everyday \
conversation during the same period.";

/// Pure response function: deterministic given the config, descriptor, and
/// the agent's call ordinal.
pub fn simulated_complete(
    config: &SimulatedAgentConfig,
    descriptor: &TaskDescriptor,
    ordinal: u64,
) -> Result<String, BackendError> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        config
            .seed
            .wrapping_add(ordinal.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    );

    match descriptor.task_kind {
        TaskKind::Rank | TaskKind::Polish | TaskKind::DebateOpen => {
            let scored = scored_items(config, &mut rng, &descriptor.item_ids)?;
            Ok(bracketed(&ranked_ids(scored)))
        }
        TaskKind::DebateRebut => {
            let scored = scored_items(config, &mut rng, &descriptor.item_ids)?;
            Ok(format!(
                "I disagree with the opposing solution; it misjudges relative impact. \
                 My ranking: {}",
                bracketed(&ranked_ids(scored))
            ))
        }
        TaskKind::Reflect => Ok(
            "The current ordering is consistent with my assessment of each theory's reach \
             and consequences. It can be used as the final solution."
                .into(),
        ),
        TaskKind::Score => {
            let id = descriptor.item_ids[0];
            let score = perturbed_score(config, &mut rng, id, 0, descriptor.item_ids.len())?;
            let (min, max) = config.latent_scores.values().fold(
                (f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), v| (lo.min(*v), hi.max(*v)),
            );
            let scaled = if max > min {
                1.0 + 99.0 * (score - min) / (max - min)
            } else {
                50.0
            };
            Ok(format!("{}", (scaled.round() as i64).clamp(1, 100)))
        }
        TaskKind::Compare => {
            if descriptor.item_ids.len() != 2 {
                return Err(BackendError::BadDescriptor(format!(
                    "compare expects 2 items, got {}",
                    descriptor.item_ids.len()
                )));
            }
            let scored = scored_items(config, &mut rng, &descriptor.item_ids)?;
            // Exact tie goes to the first-presented item.
            let winner = if scored[1].1 > scored[0].1 {
                scored[1].0
            } else {
                scored[0].0
            };
            Ok(winner.to_string())
        }
        TaskKind::Judge => {
            let Some(TaskAux::JudgeInput {
                affirmative,
                negative,
                forced,
            }) = &descriptor.aux
            else {
                return Err(BackendError::BadDescriptor("judge aux missing".into()));
            };
            let scored = scored_items(config, &mut rng, &descriptor.item_ids)?;
            let preference = ranked_ids(scored);
            let a = pair_agreement(affirmative, &preference);
            let n = pair_agreement(negative, &preference);
            if a > n {
                Ok("affirmative".into())
            } else if n > a {
                Ok("negative".into())
            } else if *forced {
                Ok("affirmative".into())
            } else {
                Ok("undecided".into())
            }
        }
        TaskKind::Rephrase => {
            let Some(TaskAux::RephraseInput { style, original }) = &descriptor.aux else {
                return Err(BackendError::BadDescriptor("rephrase aux missing".into()));
            };
            match style {
                VariantKind::Formal | VariantKind::Casual | VariantKind::Neutral => {
                    Ok(original.clone())
                }
                VariantKind::VerboseRelevant => Ok(format!("{original} {RELEVANT_PAD}")),
                VariantKind::VerboseIrrelevant => Ok(format!("{original} {IRRELEVANT_PAD}")),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(noise: f64, bias: f64) -> SimulatedAgentConfig {
        SimulatedAgentConfig {
            latent_scores: [(ItemId(1), 0.9), (ItemId(2), 0.5), (ItemId(3), 0.1)]
                .into_iter()
                .collect(),
            noise_sigma: noise,
            position_bias_strength: bias,
            seed: 42,
        }
    }

    fn descriptor(kind: TaskKind, ids: &[u32], aux: Option<TaskAux>) -> TaskDescriptor {
        TaskDescriptor::new(kind, ids.iter().map(|i| ItemId(*i)).collect(), aux).unwrap()
    }

    #[test]
    fn noiseless_rank_sorts_by_latent_descending() {
        let d = descriptor(TaskKind::Rank, &[1, 2, 3], None);
        assert_eq!(
            simulated_complete(&config(0.0, 0.0), &d, 0).unwrap(),
            "[1, 2, 3]"
        );
        let shuffled = descriptor(TaskKind::Rank, &[3, 1, 2], None);
        assert_eq!(
            simulated_complete(&config(0.0, 0.0), &shuffled, 0).unwrap(),
            "[1, 2, 3]"
        );
    }

    #[test]
    fn compare_picks_higher_latent() {
        let d = descriptor(TaskKind::Compare, &[2, 3], None);
        assert_eq!(simulated_complete(&config(0.0, 0.0), &d, 0).unwrap(), "2");
    }

    #[test]
    fn dominant_position_bias_echoes_presentation_order() {
        // Bonus range (100) far exceeds the latent range (0.8).
        let d = descriptor(TaskKind::Rank, &[3, 2, 1], None);
        assert_eq!(
            simulated_complete(&config(0.0, 100.0), &d, 0).unwrap(),
            "[3, 2, 1]"
        );
    }

    #[test]
    fn deterministic_given_seed_and_ordinal() {
        let d = descriptor(TaskKind::Rank, &[1, 2, 3], None);
        let cfg = config(2.0, 0.0);
        let a = simulated_complete(&cfg, &d, 5).unwrap();
        let b = simulated_complete(&cfg, &d, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uncovered_id_is_an_error() {
        let d = descriptor(TaskKind::Rank, &[1, 9], None);
        assert!(matches!(
            simulated_complete(&config(0.0, 0.0), &d, 0),
            Err(BackendError::UncoveredId(ItemId(9)))
        ));
    }

    #[test]
    fn scores_scale_latents_into_1_to_100() {
        let cfg = config(0.0, 0.0);
        let top = descriptor(TaskKind::Score, &[1], None);
        let mid = descriptor(TaskKind::Score, &[2], None);
        let low = descriptor(TaskKind::Score, &[3], None);
        assert_eq!(simulated_complete(&cfg, &top, 0).unwrap(), "100");
        assert_eq!(simulated_complete(&cfg, &mid, 0).unwrap(), "51");
        assert_eq!(simulated_complete(&cfg, &low, 0).unwrap(), "1");
    }

    #[test]
    fn judge_prefers_side_closer_to_latent_order() {
        let cfg = config(0.0, 0.0);
        let good = vec![ItemId(1), ItemId(2), ItemId(3)];
        let bad = vec![ItemId(3), ItemId(2), ItemId(1)];
        let d = descriptor(
            TaskKind::Judge,
            &[1, 2, 3],
            Some(TaskAux::JudgeInput {
                affirmative: bad.clone(),
                negative: good.clone(),
                forced: false,
            }),
        );
        assert_eq!(simulated_complete(&cfg, &d, 0).unwrap(), "negative");

        let tie = descriptor(
            TaskKind::Judge,
            &[1, 2, 3],
            Some(TaskAux::JudgeInput {
                affirmative: good.clone(),
                negative: good.clone(),
                forced: false,
            }),
        );
        assert_eq!(simulated_complete(&cfg, &tie, 0).unwrap(), "undecided");

        let forced_tie = descriptor(
            TaskKind::Judge,
            &[1, 2, 3],
            Some(TaskAux::JudgeInput {
                affirmative: good.clone(),
                negative: good,
                forced: true,
            }),
        );
        assert_eq!(simulated_complete(&cfg, &forced_tie, 0).unwrap(), "affirmative");
    }

    #[test]
    fn rephrase_styles() {
        let cfg = config(0.0, 0.0);
        let styled = |style| {
            descriptor(
                TaskKind::Rephrase,
                &[1],
                Some(TaskAux::RephraseInput {
                    style,
                    original: "A short claim.".into(),
                }),
            )
        };
        assert_eq!(
            simulated_complete(&cfg, &styled(VariantKind::Formal), 0).unwrap(),
            "A short claim."
        );
        let verbose =
            simulated_complete(&cfg, &styled(VariantKind::VerboseRelevant), 0).unwrap();
        assert!(verbose.split_whitespace().count() > 3);
        assert!(verbose.starts_with("A short claim."));
    }
}
