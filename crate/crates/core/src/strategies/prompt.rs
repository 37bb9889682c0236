//! Prompt templates for the six assessment strategies and the rendering
//! that fills them. Each rendered message keeps the template wording
//! intact, substitutes the bracketed placeholders, and appends a
//! machine-format instruction so responses can be parsed reliably.
//!
//! Items render as "id. text" lines in presentation order; ids are the
//! stable dataset indices, so shuffled presentations keep original index
//! numbers.

use crate::backend::{ChatMessage, PromptBundle, TaskAux, TaskDescriptor, TaskKind};
use crate::domain::{Dataset, ItemId, Ranking};

use super::{StrategyError, StrategyKind};

pub const VANILLA_TEMPLATE: &str = "Given the following [list of CTs], please rank them from \
most to least impactful. Please only output the final ranking.";

pub const COT_TEMPLATE: &str = "Given the following [list of CTs], please rank them from most \
to least impactful, providing reasoning as intermediate steps followed by the final ranking.";

pub const PAIRWISE_TEMPLATE: &str = "Given two conspiracy theories at a time from the following \
[list of CTs], compare their relative impact and decide which one is more impactful.";

pub const SCORING_TEMPLATE: &str = "For each conspiracy theory in the following [list of CTs], \
assign an individual impact score on a scale of 1 to 100, where 100 indicates maximum impact.";

pub const DEBATE_BASE_TEMPLATE: &str = "Given the following conspiracy theories [list of CTs], \
please rank them from most to least impactful.";

pub const DEBATE_REBUT_TEMPLATE: &str = "You are a debater. The debate topic is stated as \
follows: What is the correct impact ranking for the following conspiracy list: [list of CTs]. \
Another debater's solution is [Another Debater's Solution]. You disagree with this solution. \
Provide your solution and reasons.";

pub const DEBATE_JUDGE_TEMPLATE: &str = "You are a moderator. Two debaters will present their \
solutions and discuss their perspectives on the correct answer: [list of CTs]. Affirmative side \
arguing: [Affirmative Side's Solution]. Negative side arguing: [Negative Side's Solution]. You \
will evaluate both sides' solutions and determine if there is a clear preference for a solution \
candidate.";

pub const REFLECTION_ASSESS_TEMPLATE: &str = "Given the following conspiracy theories, please \
rank them from most to least impactful with the original index numbers preserved: [list of CTs].";

pub const REFLECTION_CRITIQUE_TEMPLATE: &str = "Given the following conspiracy theories and a \
given ranking list based on their impact, please produce a critique and reflection on it, and \
decide whether it can be used as the final solution. Conspiracy: [list of CTs], Original \
Solution: [current assessment].";

pub const REFLECTION_POLISH_TEMPLATE: &str = "Given the following conspiracy theories, please \
rank them from most to least impactful with the original index numbers preserved. There is \
already an original solution and reflection on this solution, please polish the given solution \
referring to the reflection. Conspiracy: [list of CTs], Original Solution: [current assessment], \
Reflection: [generated reflection].";

/// Output-grammar suffix for ranking answers.
pub const RANKING_FORMAT_SUFFIX: &str = "Output the final answer as a bracketed, \
comma-separated list of the original index numbers, e.g., [3, 1, 2].";

pub const COMPARE_FORMAT_SUFFIX: &str =
    "Output only the index number of the more impactful conspiracy theory.";

pub const SCORE_FORMAT_SUFFIX: &str =
    "Output only the impact score as a single integer between 1 and 100.";

pub const JUDGE_FORMAT_SUFFIX: &str = "If there is a clear preference, state your verdict as a \
single word: \"affirmative\" or \"negative\". Otherwise output the single word \"undecided\".";

pub const JUDGE_FORCED_SUFFIX: &str = "You must choose one side. State your verdict as a single \
word: \"affirmative\" or \"negative\".";

/// Protocol step being rendered. Which phases are valid depends on the
/// strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Assess,
    Reflect,
    Polish,
    Open,
    Rebut,
    Judge,
    Compare,
    Score,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Phase::Assess => "assess",
            Phase::Reflect => "reflect",
            Phase::Polish => "polish",
            Phase::Open => "open",
            Phase::Rebut => "rebut",
            Phase::Judge => "judge",
            Phase::Compare => "compare",
            Phase::Score => "score",
        };
        f.pad(s)
    }
}

/// Per-phase inputs beyond the dataset itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct PhaseContext<'a> {
    /// Pair under comparison, in presentation order.
    pub pair: Option<(ItemId, ItemId)>,
    /// Item being scored.
    pub item: Option<ItemId>,
    /// Ranking being reflected on or polished.
    pub current: Option<&'a Ranking>,
    /// Critique text for the polish phase.
    pub reflection: Option<&'a str>,
    /// The other debater's latest solution.
    pub opposing: Option<&'a Ranking>,
    /// Affirmative solution and argument, for judgment.
    pub affirmative: Option<(&'a Ranking, &'a str)>,
    /// Negative solution and argument, for judgment.
    pub negative: Option<(&'a Ranking, &'a str)>,
    /// Demand a side verdict (final debate round).
    pub forced: bool,
}

fn bracketed(ids: &[ItemId]) -> String {
    let inner: Vec<String> = ids.iter().map(ToString::to_string).collect();
    format!("[{}]", inner.join(", "))
}

fn numbered_lines(dataset: &Dataset, ids: &[ItemId]) -> String {
    ids.iter()
        .map(|id| {
            let item = dataset.item(*id).expect("id validated against dataset");
            format!("{}. {}", id, item.text)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn solution_with_reason(ranking: &Ranking, argument: &str) -> String {
    if argument.trim().is_empty() {
        bracketed(&ranking.ordered)
    } else {
        format!("{} (reasoning: {})", bracketed(&ranking.ordered), argument.trim())
    }
}

fn missing(what: &str, kind: StrategyKind, phase: Phase) -> StrategyError {
    StrategyError::MissingContext {
        kind,
        phase,
        what: what.to_string(),
    }
}

/// Renders the template for a strategy phase into a [`PromptBundle`] whose
/// descriptor mirrors the request.
pub fn render_prompt(
    kind: StrategyKind,
    phase: Phase,
    dataset: &Dataset,
    ctx: &PhaseContext<'_>,
) -> Result<PromptBundle, StrategyError> {
    let full_list = dataset.presentation_order.clone();
    let list_block = |ids: &[ItemId]| format!("\n{}\n", numbered_lines(dataset, ids));

    let (template, item_ids, task_kind, aux, suffix): (
        &str,
        Vec<ItemId>,
        TaskKind,
        Option<TaskAux>,
        String,
    ) = match (kind, phase) {
        (StrategyKind::Vanilla, Phase::Assess) => (
            VANILLA_TEMPLATE,
            full_list,
            TaskKind::Rank,
            None,
            RANKING_FORMAT_SUFFIX.to_string(),
        ),
        (StrategyKind::Cot, Phase::Assess) => (
            COT_TEMPLATE,
            full_list,
            TaskKind::Rank,
            None,
            RANKING_FORMAT_SUFFIX.to_string(),
        ),
        (StrategyKind::Pairwise, Phase::Compare) => {
            let (a, b) = ctx.pair.ok_or_else(|| missing("pair", kind, phase))?;
            (
                PAIRWISE_TEMPLATE,
                vec![a, b],
                TaskKind::Compare,
                None,
                COMPARE_FORMAT_SUFFIX.to_string(),
            )
        }
        (StrategyKind::Scoring, Phase::Score) => {
            let item = ctx.item.ok_or_else(|| missing("item", kind, phase))?;
            (
                SCORING_TEMPLATE,
                vec![item],
                TaskKind::Score,
                None,
                SCORE_FORMAT_SUFFIX.to_string(),
            )
        }
        (StrategyKind::SelfReflection, Phase::Assess) => (
            REFLECTION_ASSESS_TEMPLATE,
            full_list,
            TaskKind::Rank,
            None,
            RANKING_FORMAT_SUFFIX.to_string(),
        ),
        (StrategyKind::SelfReflection, Phase::Reflect) => {
            let current = ctx
                .current
                .ok_or_else(|| missing("current assessment", kind, phase))?;
            (
                REFLECTION_CRITIQUE_TEMPLATE,
                full_list,
                TaskKind::Reflect,
                Some(TaskAux::CurrentRanking {
                    ordered: current.ordered.clone(),
                }),
                String::new(),
            )
        }
        (StrategyKind::SelfReflection, Phase::Polish) => {
            let current = ctx
                .current
                .ok_or_else(|| missing("current assessment", kind, phase))?;
            let reflection = ctx
                .reflection
                .ok_or_else(|| missing("reflection", kind, phase))?;
            (
                REFLECTION_POLISH_TEMPLATE,
                full_list,
                TaskKind::Polish,
                Some(TaskAux::PolishInput {
                    ordered: current.ordered.clone(),
                    reflection: reflection.to_string(),
                }),
                RANKING_FORMAT_SUFFIX.to_string(),
            )
        }
        (StrategyKind::Debate, Phase::Open) => (
            DEBATE_BASE_TEMPLATE,
            full_list,
            TaskKind::DebateOpen,
            None,
            RANKING_FORMAT_SUFFIX.to_string(),
        ),
        (StrategyKind::Debate, Phase::Rebut) => {
            let opposing = ctx
                .opposing
                .ok_or_else(|| missing("opposing solution", kind, phase))?;
            (
                DEBATE_REBUT_TEMPLATE,
                full_list,
                TaskKind::DebateRebut,
                Some(TaskAux::OpposingRanking {
                    ordered: opposing.ordered.clone(),
                }),
                RANKING_FORMAT_SUFFIX.to_string(),
            )
        }
        (StrategyKind::Debate, Phase::Judge) => {
            let (aff, _) = ctx
                .affirmative
                .ok_or_else(|| missing("affirmative solution", kind, phase))?;
            let (neg, _) = ctx
                .negative
                .ok_or_else(|| missing("negative solution", kind, phase))?;
            let suffix = if ctx.forced {
                JUDGE_FORCED_SUFFIX
            } else {
                JUDGE_FORMAT_SUFFIX
            };
            (
                DEBATE_JUDGE_TEMPLATE,
                full_list,
                TaskKind::Judge,
                Some(TaskAux::JudgeInput {
                    affirmative: aff.ordered.clone(),
                    negative: neg.ordered.clone(),
                    forced: ctx.forced,
                }),
                suffix.to_string(),
            )
        }
        (kind, phase) => {
            return Err(StrategyError::UnknownPhase { kind, phase });
        }
    };

    let mut text = template.replace("[list of CTs]", &list_block(&item_ids));
    if let Some(current) = ctx.current {
        text = text.replace("[current assessment]", &bracketed(&current.ordered));
    }
    if let Some(reflection) = ctx.reflection {
        text = text.replace("[generated reflection]", reflection.trim());
    }
    if let Some(opposing) = ctx.opposing {
        text = text.replace("[Another Debater's Solution]", &bracketed(&opposing.ordered));
    }
    if let Some((aff, arg)) = ctx.affirmative {
        text = text.replace("[Affirmative Side's Solution]", &solution_with_reason(aff, arg));
    }
    if let Some((neg, arg)) = ctx.negative {
        text = text.replace("[Negative Side's Solution]", &solution_with_reason(neg, arg));
    }
    if !suffix.is_empty() {
        text.push_str("\n\n");
        text.push_str(&suffix);
    }

    let descriptor = TaskDescriptor::new(task_kind, item_ids, aux)?;
    Ok(PromptBundle {
        messages: vec![ChatMessage::user(text)],
        descriptor,
    })
}
