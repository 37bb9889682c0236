//! The six assessment strategies: vanilla ranking, chain-of-thought,
//! pairwise comparison with Copeland aggregation, individual scoring,
//! self-reflection, and multi-agent debating.
//!
//! Every engine returns a ranking that is a verified permutation of the
//! dataset's ids, or a hard error after the configured parse retries;
//! there are no silent partial results.

pub mod parse;
pub mod prompt;

pub use parse::{parse_choice, parse_ranking, parse_score, parse_verdict, ParseError};
pub use prompt::{render_prompt, Phase, PhaseContext};

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, BackendHandle, PromptBundle};
use crate::domain::{
    Dataset, ExperimentConfig, ItemId, PairwiseOrderMode, Provenance, Ranking,
};

/// The six strategy engines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Vanilla,
    Cot,
    Pairwise,
    Scoring,
    SelfReflection,
    Debate,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::Vanilla,
        StrategyKind::Cot,
        StrategyKind::Pairwise,
        StrategyKind::Scoring,
        StrategyKind::SelfReflection,
        StrategyKind::Debate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Vanilla => "vanilla",
            StrategyKind::Cot => "cot",
            StrategyKind::Pairwise => "pairwise",
            StrategyKind::Scoring => "scoring",
            StrategyKind::SelfReflection => "self_reflection",
            StrategyKind::Debate => "debate",
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vanilla" => Ok(StrategyKind::Vanilla),
            "cot" => Ok(StrategyKind::Cot),
            "pairwise" => Ok(StrategyKind::Pairwise),
            "scoring" => Ok(StrategyKind::Scoring),
            "self_reflection" => Ok(StrategyKind::SelfReflection),
            "debate" => Ok(StrategyKind::Debate),
            other => Err(format!("unknown strategy '{other}'")),
        }
    }
}

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("phase '{phase}' is not valid for strategy '{kind}'")]
    UnknownPhase { kind: StrategyKind, phase: Phase },
    #[error("{kind}/{phase} requires {what} in the phase context")]
    MissingContext {
        kind: StrategyKind,
        phase: Phase,
        what: String,
    },
    #[error("unparseable response after {attempts} attempt(s): {source}")]
    ParseFailure {
        attempts: u32,
        #[source]
        source: ParseError,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Per-item integer scores assigned by the scoring strategy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreAssignment {
    /// id -> score in 1..=100.
    pub scores: BTreeMap<ItemId, u32>,
}

/// One self-reflection round. `accepted` marks the round whose ranking the
/// protocol stopped with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionRecord {
    pub round: u32,
    pub ranking: Ranking,
    pub reflection: String,
    pub accepted: bool,
}

/// The moderator's call for one debate round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeVerdict {
    Undecided,
    Affirmative,
    Negative,
}

/// Snapshot of one debate round after both rebuttals and the judgment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebateState {
    pub round: u32,
    pub affirmative_ranking: Ranking,
    pub negative_ranking: Ranking,
    pub affirmative_argument: String,
    pub negative_argument: String,
    pub verdict: JudgeVerdict,
    /// Set when the verdict decided the debate: always a copy of the
    /// winning side's ranking, never a new one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_ranking: Option<Ranking>,
}

fn provenance(kind: StrategyKind, handle: &BackendHandle) -> Provenance {
    Provenance {
        strategy: Some(kind.to_string()),
        backend: Some(handle.id().to_string()),
        repetition: Some(handle.repetition()),
    }
}

/// Issues a bundle, parsing the response; parse failures retry the same
/// bundle up to `retries` more times, backend failures abort immediately.
fn complete_parsed<T>(
    handle: &BackendHandle,
    bundle: &PromptBundle,
    retries: u32,
    parse: impl Fn(&str) -> Result<T, ParseError>,
) -> Result<(T, String), StrategyError> {
    let mut last = ParseError::NoRankingList;
    for attempt in 1..=retries.saturating_add(1) {
        let text = handle.complete_attempt(bundle, attempt)?;
        match parse(&text) {
            Ok(value) => return Ok((value, text)),
            Err(err) => last = err,
        }
    }
    Err(StrategyError::ParseFailure {
        attempts: retries.saturating_add(1),
        source: last,
    })
}

fn complete_ranking(
    kind: StrategyKind,
    handle: &BackendHandle,
    bundle: &PromptBundle,
    dataset: &Dataset,
    config: &ExperimentConfig,
) -> Result<(Ranking, String), StrategyError> {
    let expected = dataset.ids();
    let (ordered, text) = complete_parsed(handle, bundle, config.parse_retries, |t| {
        parse_ranking(t, &expected)
    })?;
    Ok((
        Ranking::new(ordered).with_provenance(provenance(kind, handle)),
        text,
    ))
}

/// Single completion, no requested reasoning; the parsed list is the answer.
pub fn run_vanilla(
    dataset: &Dataset,
    handle: &BackendHandle,
    config: &ExperimentConfig,
) -> Result<Ranking, StrategyError> {
    let bundle = render_prompt(
        StrategyKind::Vanilla,
        Phase::Assess,
        dataset,
        &PhaseContext::default(),
    )?;
    Ok(complete_ranking(StrategyKind::Vanilla, handle, &bundle, dataset, config)?.0)
}

/// Single completion with intermediate reasoning requested; the reasoning
/// stays in the transcript and the trailing list is the answer.
pub fn run_cot(
    dataset: &Dataset,
    handle: &BackendHandle,
    config: &ExperimentConfig,
) -> Result<Ranking, StrategyError> {
    let bundle = render_prompt(
        StrategyKind::Cot,
        Phase::Assess,
        dataset,
        &PhaseContext::default(),
    )?;
    Ok(complete_ranking(StrategyKind::Cot, handle, &bundle, dataset, config)?.0)
}

/// Outcome of one unordered pair of comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairOutcome {
    Decided(ItemId),
    /// Unparseable after retries; counts half a win for each side.
    Skipped,
}

/// One pair's aggregated result; `a < b` by id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairResult {
    pub a: ItemId,
    pub b: ItemId,
    pub outcome: PairOutcome,
}

/// Copeland aggregation: items ranked by descending win count. Two-way win
/// ties break by the head-to-head result when that pair was decided; all
/// remaining ties break by ascending id.
pub fn aggregate_copeland(ids: &[ItemId], results: &[PairResult]) -> Vec<ItemId> {
    // Wins in half-units so skipped pairs stay exact.
    let mut wins: BTreeMap<ItemId, u64> = ids.iter().map(|id| (*id, 0)).collect();
    let mut head_to_head: BTreeMap<(ItemId, ItemId), ItemId> = BTreeMap::new();
    for result in results {
        match result.outcome {
            PairOutcome::Decided(winner) => {
                *wins.entry(winner).or_default() += 2;
                head_to_head.insert((result.a, result.b), winner);
            }
            PairOutcome::Skipped => {
                *wins.entry(result.a).or_default() += 1;
                *wins.entry(result.b).or_default() += 1;
            }
        }
    }
    let mut ordered: Vec<ItemId> = ids.to_vec();
    ordered.sort_by(|x, y| wins[y].cmp(&wins[x]).then(x.cmp(y)));

    let mut i = 0;
    while i < ordered.len() {
        let mut j = i + 1;
        while j < ordered.len() && wins[&ordered[j]] == wins[&ordered[i]] {
            j += 1;
        }
        if j - i == 2 {
            let (x, y) = (ordered[i], ordered[i + 1]);
            if head_to_head.get(&(x.min(y), x.max(y))) == Some(&y) {
                ordered.swap(i, i + 1);
            }
        }
        i = j;
    }
    ordered
}

/// All-pairs comparison: `C(n,2)` queries in single-order mode, double that
/// in both-order mode with per-pair majority; split verdicts resolve to the
/// item presented first in the initial ascending-id query. Unparseable
/// pairs are skipped with a logged warning and score half a win each.
pub fn run_pairwise(
    dataset: &Dataset,
    handle: &BackendHandle,
    config: &ExperimentConfig,
) -> Result<Ranking, StrategyError> {
    let mut ids = dataset.ids();
    ids.sort();

    let ask = |first: ItemId, second: ItemId| -> Result<Option<ItemId>, StrategyError> {
        let bundle = render_prompt(
            StrategyKind::Pairwise,
            Phase::Compare,
            dataset,
            &PhaseContext {
                pair: Some((first, second)),
                ..Default::default()
            },
        )?;
        match complete_parsed(handle, &bundle, config.parse_retries, |t| {
            parse_choice(t, first, second)
        }) {
            Ok((winner, _)) => Ok(Some(winner)),
            Err(StrategyError::ParseFailure { .. }) => Ok(None),
            Err(other) => Err(other),
        }
    };

    let mut results = Vec::new();
    for i in 0..ids.len() {
        for j in (i + 1)..ids.len() {
            let (a, b) = (ids[i], ids[j]);
            let outcome = match config.pairwise_order_mode {
                PairwiseOrderMode::Single => match ask(a, b)? {
                    Some(winner) => PairOutcome::Decided(winner),
                    None => PairOutcome::Skipped,
                },
                PairwiseOrderMode::Both => {
                    let first = ask(a, b)?;
                    let second = ask(b, a)?;
                    match (first, second) {
                        (Some(w1), Some(w2)) if w1 == w2 => PairOutcome::Decided(w1),
                        (Some(_), Some(_)) => PairOutcome::Decided(a),
                        _ => PairOutcome::Skipped,
                    }
                }
            };
            if outcome == PairOutcome::Skipped {
                log::warn!("pair ({a}, {b}) skipped after unparseable comparisons");
            }
            results.push(PairResult { a, b, outcome });
        }
    }

    let ordered = aggregate_copeland(&ids, &results);
    Ok(Ranking::new(ordered).with_provenance(provenance(StrategyKind::Pairwise, handle)))
}

/// One completion per item asking for an integer impact score in 1..=100;
/// the ranking sorts by descending score with ascending-id tie-breaks.
pub fn run_scoring(
    dataset: &Dataset,
    handle: &BackendHandle,
    config: &ExperimentConfig,
) -> Result<(Ranking, ScoreAssignment), StrategyError> {
    let mut scores = BTreeMap::new();
    for id in &dataset.presentation_order {
        let bundle = render_prompt(
            StrategyKind::Scoring,
            Phase::Score,
            dataset,
            &PhaseContext {
                item: Some(*id),
                ..Default::default()
            },
        )?;
        let (score, _) = complete_parsed(handle, &bundle, config.parse_retries, parse_score)?;
        scores.insert(*id, score);
    }
    let mut ordered: Vec<ItemId> = dataset.ids();
    ordered.sort_by(|x, y| scores[y].cmp(&scores[x]).then(x.cmp(y)));
    Ok((
        Ranking::new(ordered).with_provenance(provenance(StrategyKind::Scoring, handle)),
        ScoreAssignment { scores },
    ))
}

/// Iterative assess / critique / polish loop. Stops at the first round whose
/// polished ranking equals the previous one, or at the round cap T.
pub fn run_self_reflection(
    dataset: &Dataset,
    handle: &BackendHandle,
    config: &ExperimentConfig,
) -> Result<(Ranking, Vec<ReflectionRecord>), StrategyError> {
    let kind = StrategyKind::SelfReflection;
    let cap = config.max_reflection_rounds;

    let assess_bundle = render_prompt(kind, Phase::Assess, dataset, &PhaseContext::default())?;
    let (mut current, _) = complete_ranking(kind, handle, &assess_bundle, dataset, config)?;
    let mut records = vec![ReflectionRecord {
        round: 1,
        ranking: current.clone(),
        reflection: String::new(),
        accepted: cap == 1,
    }];
    if cap == 1 {
        return Ok((current, records));
    }

    for round in 2..=cap {
        let reflect_bundle = render_prompt(
            kind,
            Phase::Reflect,
            dataset,
            &PhaseContext {
                current: Some(&current),
                ..Default::default()
            },
        )?;
        // The critique is free text; no parsing, it goes into the record.
        let reflection = handle.complete(&reflect_bundle)?;

        let polish_bundle = render_prompt(
            kind,
            Phase::Polish,
            dataset,
            &PhaseContext {
                current: Some(&current),
                reflection: Some(&reflection),
                ..Default::default()
            },
        )?;
        let (polished, _) = complete_ranking(kind, handle, &polish_bundle, dataset, config)?;

        let fixed_point = polished.ordered == current.ordered;
        let terminal = fixed_point || round == cap;
        records.push(ReflectionRecord {
            round,
            ranking: polished.clone(),
            reflection,
            accepted: terminal,
        });
        current = polished;
        if terminal {
            break;
        }
    }
    Ok((current, records))
}

/// Three-agent debate: the affirmative opens, then each round the negative
/// rebuts, the affirmative counter-rebuts, and the judge either selects a
/// side or abstains into the next round. At the final round the judge
/// prompt demands a verdict, so the protocol always terminates. The judge
/// only ever selects an existing solution.
pub fn run_debate(
    dataset: &Dataset,
    affirmative: &BackendHandle,
    negative: &BackendHandle,
    judge: &BackendHandle,
    config: &ExperimentConfig,
) -> Result<(Ranking, Vec<DebateState>), StrategyError> {
    let kind = StrategyKind::Debate;
    let open_bundle = render_prompt(kind, Phase::Open, dataset, &PhaseContext::default())?;
    let (mut aff_ranking, _opening_text) =
        complete_ranking(kind, affirmative, &open_bundle, dataset, config)?;
    let mut aff_argument;

    let mut states = Vec::new();
    for round in 1..=config.max_debate_rounds {
        let neg_bundle = render_prompt(
            kind,
            Phase::Rebut,
            dataset,
            &PhaseContext {
                opposing: Some(&aff_ranking),
                ..Default::default()
            },
        )?;
        let (neg_ranking, neg_argument) =
            complete_ranking(kind, negative, &neg_bundle, dataset, config)?;

        let aff_bundle = render_prompt(
            kind,
            Phase::Rebut,
            dataset,
            &PhaseContext {
                opposing: Some(&neg_ranking),
                ..Default::default()
            },
        )?;
        let (aff_rebuttal, aff_rebuttal_argument) =
            complete_ranking(kind, affirmative, &aff_bundle, dataset, config)?;
        aff_ranking = aff_rebuttal;
        aff_argument = aff_rebuttal_argument;

        let forced = round == config.max_debate_rounds;
        let judge_bundle = render_prompt(
            kind,
            Phase::Judge,
            dataset,
            &PhaseContext {
                affirmative: Some((&aff_ranking, &aff_argument)),
                negative: Some((&neg_ranking, &neg_argument)),
                forced,
                ..Default::default()
            },
        )?;
        let (verdict, _) = complete_parsed(judge, &judge_bundle, config.parse_retries, |t| {
            parse_verdict(t, forced)
        })?;

        let final_ranking = match verdict {
            JudgeVerdict::Affirmative => Some(aff_ranking.clone()),
            JudgeVerdict::Negative => Some(neg_ranking.clone()),
            JudgeVerdict::Undecided => None,
        };
        states.push(DebateState {
            round,
            affirmative_ranking: aff_ranking.clone(),
            negative_ranking: neg_ranking.clone(),
            affirmative_argument: aff_argument.clone(),
            negative_argument: neg_argument,
            verdict,
            final_ranking: final_ranking.clone(),
        });
        // The winner keeps the provenance of the debater that authored it;
        // the judge selects, it never authors.
        if let Some(winner) = final_ranking {
            return Ok((winner, states));
        }
    }
    unreachable!("the final round forces a verdict or fails parsing");
}
