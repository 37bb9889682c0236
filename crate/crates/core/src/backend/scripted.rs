//! Scripted test backends with fixed, fully predictable behavior. These
//! exist to exercise protocol control flow (fixed points, round caps,
//! forced verdicts, hard failures) independently of the latent-score agent.

use std::sync::atomic::{AtomicU64, Ordering};

use super::{BackendError, ChatBackend, DecodeParams, PromptBundle, TaskAux, TaskKind};
use crate::domain::ItemId;

fn bracketed(ids: &[ItemId]) -> String {
    let inner: Vec<String> = ids.iter().map(ToString::to_string).collect();
    format!("[{}]", inner.join(", "))
}

/// Always answers ranking-style tasks with the same fixed ordering.
pub struct FixedRankingAgent {
    id: String,
    ordered: Vec<ItemId>,
}

impl FixedRankingAgent {
    pub fn new(id: impl Into<String>, ordered: Vec<ItemId>) -> Self {
        Self {
            id: id.into(),
            ordered,
        }
    }
}

impl ChatBackend for FixedRankingAgent {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(
        &self,
        bundle: &PromptBundle,
        _params: &DecodeParams,
    ) -> Result<String, BackendError> {
        match bundle.descriptor.task_kind {
            TaskKind::Rank | TaskKind::Polish | TaskKind::DebateOpen | TaskKind::DebateRebut => {
                Ok(bracketed(&self.ordered))
            }
            TaskKind::Reflect => Ok("No changes needed; the ordering stands.".into()),
            TaskKind::Score => Ok("50".into()),
            TaskKind::Compare => Ok(bundle.descriptor.item_ids[0].to_string()),
            other => Err(BackendError::UnsupportedTask {
                backend: self.id.clone(),
                task: other.as_str().into(),
            }),
        }
    }
}

/// Rotates its ranking by one position on every ranking-style call, so no
/// two consecutive answers agree: the self-reflection loop never reaches a
/// fixed point with this agent.
pub struct RotatingRankingAgent {
    id: String,
    base: Vec<ItemId>,
    rank_calls: AtomicU64,
}

impl RotatingRankingAgent {
    pub fn new(id: impl Into<String>, base: Vec<ItemId>) -> Self {
        Self {
            id: id.into(),
            base,
            rank_calls: AtomicU64::new(0),
        }
    }

    fn next_rotation(&self) -> Vec<ItemId> {
        let k = self.rank_calls.fetch_add(1, Ordering::SeqCst) as usize % self.base.len();
        let mut out = self.base.clone();
        out.rotate_left(k);
        out
    }
}

impl ChatBackend for RotatingRankingAgent {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(
        &self,
        bundle: &PromptBundle,
        _params: &DecodeParams,
    ) -> Result<String, BackendError> {
        match bundle.descriptor.task_kind {
            TaskKind::Rank | TaskKind::Polish | TaskKind::DebateOpen | TaskKind::DebateRebut => {
                Ok(bracketed(&self.next_rotation()))
            }
            TaskKind::Reflect => Ok("The ordering should change again.".into()),
            other => Err(BackendError::UnsupportedTask {
                backend: self.id.clone(),
                task: other.as_str().into(),
            }),
        }
    }
}

/// How a scripted judge answers judge tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JudgePolicy {
    /// "undecided" until the bundle demands a verdict, then "affirmative".
    AbstainUntilForced,
    /// "undecided" always, even when forced; exercises the hard-failure path.
    AlwaysAbstain,
    PickAffirmative,
    PickNegative,
}

pub struct ScriptedJudge {
    id: String,
    policy: JudgePolicy,
}

impl ScriptedJudge {
    pub fn new(id: impl Into<String>, policy: JudgePolicy) -> Self {
        Self {
            id: id.into(),
            policy,
        }
    }
}

impl ChatBackend for ScriptedJudge {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(
        &self,
        bundle: &PromptBundle,
        _params: &DecodeParams,
    ) -> Result<String, BackendError> {
        match bundle.descriptor.task_kind {
            TaskKind::Judge => {
                let forced = matches!(
                    bundle.descriptor.aux,
                    Some(TaskAux::JudgeInput { forced: true, .. })
                );
                let verdict = match self.policy {
                    JudgePolicy::PickAffirmative => "affirmative",
                    JudgePolicy::PickNegative => "negative",
                    JudgePolicy::AlwaysAbstain => "undecided",
                    JudgePolicy::AbstainUntilForced => {
                        if forced {
                            "affirmative"
                        } else {
                            "undecided"
                        }
                    }
                };
                Ok(verdict.into())
            }
            other => Err(BackendError::UnsupportedTask {
                backend: self.id.clone(),
                task: other.as_str().into(),
            }),
        }
    }
}

/// Replies with the same canned text to everything. With prose that carries
/// no bracketed list this drives parse retries into hard failures.
pub struct CannedTextAgent {
    id: String,
    text: String,
}

impl CannedTextAgent {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }
}

impl ChatBackend for CannedTextAgent {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(
        &self,
        _bundle: &PromptBundle,
        _params: &DecodeParams,
    ) -> Result<String, BackendError> {
        Ok(self.text.clone())
    }
}
