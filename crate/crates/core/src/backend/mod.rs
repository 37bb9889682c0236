//! Uniform chat-completion interface over HTTP model endpoints and
//! deterministic simulated agents, with per-call transcript capture and an
//! opt-in completion cache.
//!
//! Every prompt travels as a [`PromptBundle`]: rendered chat messages for
//! real backends plus a machine-readable [`TaskDescriptor`] so simulated
//! agents can act on structure alone, without parsing prose. Real backends
//! only look at the messages; simulated ones only at the descriptor.

mod http;
pub mod scripted;
mod simulated;

pub use http::{HttpBackend, HttpBackendConfig};
pub use simulated::{simulated_complete, SimulatedAgent, SimulatedAgentConfig};

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{ItemId, VariantKind};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {detail}")]
    Transport { attempts: u32, detail: String },
    #[error("backend returned HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("backend returned an empty completion")]
    EmptyCompletion,
    #[error("chat message has empty content")]
    EmptyMessage,
    #[error("simulated agent has no latent score for id {0}")]
    UncoveredId(ItemId),
    #[error("task descriptor invalid: {0}")]
    BadDescriptor(String),
    #[error("backend '{backend}' does not handle task '{task}'")]
    UnsupportedTask { backend: String, task: String },
    #[error("environment variable {0} is not set")]
    MissingApiKey(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// What a prompt is asking for, in machine-readable form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Rank,
    Score,
    Compare,
    Reflect,
    Polish,
    DebateOpen,
    DebateRebut,
    Judge,
    Rephrase,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Rank => "rank",
            TaskKind::Score => "score",
            TaskKind::Compare => "compare",
            TaskKind::Reflect => "reflect",
            TaskKind::Polish => "polish",
            TaskKind::DebateOpen => "debate_open",
            TaskKind::DebateRebut => "debate_rebut",
            TaskKind::Judge => "judge",
            TaskKind::Rephrase => "rephrase",
        }
    }

    fn requires_aux(self) -> bool {
        matches!(
            self,
            TaskKind::Reflect
                | TaskKind::Polish
                | TaskKind::DebateRebut
                | TaskKind::Judge
                | TaskKind::Rephrase
        )
    }
}

/// Structured payload accompanying tasks that need more than the item list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskAux {
    /// Ranking under critique (reflect phase).
    CurrentRanking { ordered: Vec<ItemId> },
    /// Ranking plus the critique to apply (polish phase).
    PolishInput {
        ordered: Vec<ItemId>,
        reflection: String,
    },
    /// The other debater's latest solution.
    OpposingRanking { ordered: Vec<ItemId> },
    /// Both debater solutions; `forced` demands a side verdict.
    JudgeInput {
        affirmative: Vec<ItemId>,
        negative: Vec<ItemId>,
        forced: bool,
    },
    /// Text to restyle.
    RephraseInput {
        style: VariantKind,
        original: String,
    },
}

impl TaskAux {
    fn matches(&self, kind: TaskKind) -> bool {
        matches!(
            (kind, self),
            (TaskKind::Reflect, TaskAux::CurrentRanking { .. })
                | (TaskKind::Polish, TaskAux::PolishInput { .. })
                | (TaskKind::DebateRebut, TaskAux::OpposingRanking { .. })
                | (TaskKind::Judge, TaskAux::JudgeInput { .. })
                | (TaskKind::Rephrase, TaskAux::RephraseInput { .. })
        )
    }
}

/// Machine-readable task description mirroring the rendered messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub task_kind: TaskKind,
    /// Item ids in the order they are presented in the prompt.
    pub item_ids: Vec<ItemId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux: Option<TaskAux>,
}

impl TaskDescriptor {
    pub fn new(
        task_kind: TaskKind,
        item_ids: Vec<ItemId>,
        aux: Option<TaskAux>,
    ) -> Result<Self, BackendError> {
        if item_ids.is_empty() {
            return Err(BackendError::BadDescriptor("item_ids is empty".into()));
        }
        match (&aux, task_kind.requires_aux()) {
            (None, true) => {
                return Err(BackendError::BadDescriptor(format!(
                    "task '{}' requires aux",
                    task_kind.as_str()
                )));
            }
            (Some(_), false) => {
                return Err(BackendError::BadDescriptor(format!(
                    "task '{}' takes no aux",
                    task_kind.as_str()
                )));
            }
            (Some(a), true) if !a.matches(task_kind) => {
                return Err(BackendError::BadDescriptor(format!(
                    "aux does not match task '{}'",
                    task_kind.as_str()
                )));
            }
            _ => {}
        }
        Ok(Self {
            task_kind,
            item_ids,
            aux,
        })
    }
}

/// Rendered messages plus the descriptor they mirror.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub messages: Vec<ChatMessage>,
    pub descriptor: TaskDescriptor,
}

impl PromptBundle {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.iter().any(|m| m.content.trim().is_empty()) {
            return Err(BackendError::EmptyMessage);
        }
        Ok(())
    }
}

/// Decoding parameters passed to the model. Temperature defaults to 0.0 so
/// repetition variance comes only from the provider or explicit overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeParams {
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: None,
        }
    }
}

/// A chat-completion provider. Implementations must be safe for concurrent
/// calls.
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, bundle: &PromptBundle, params: &DecodeParams)
        -> Result<String, BackendError>;
}

/// One line of transcripts.jsonl: a single backend invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    /// Unix epoch milliseconds at call start.
    pub ts: u64,
    pub backend: String,
    pub repetition: u32,
    pub task_kind: TaskKind,
    pub messages: Vec<ChatMessage>,
    pub response: String,
    /// 1 on the first attempt at a protocol step; >1 flags a parse retry.
    pub attempt: u32,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub cache_hit: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Shared, append-serialized collection of transcript entries.
#[derive(Debug, Clone, Default)]
pub struct TranscriptSink {
    entries: Arc<Mutex<Vec<TranscriptEntry>>>,
}

impl TranscriptSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&self, entry: TranscriptEntry) {
        self.entries.lock().expect("transcript lock").push(entry);
    }

    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.entries.lock().expect("transcript lock").clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("transcript lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entries counting toward a strategy's exact call formula (parse
    /// retries excluded).
    pub fn protocol_calls(&self) -> usize {
        self.entries
            .lock()
            .expect("transcript lock")
            .iter()
            .filter(|e| e.attempt == 1)
            .count()
    }
}

/// Stable content digest over messages, decode parameters, backend id, and
/// repetition index. Repetitions hash differently so "repeated 3 times"
/// never collapses into one cached call.
pub fn cache_key(
    bundle: &PromptBundle,
    params: &DecodeParams,
    backend_id: &str,
    repetition: u32,
) -> String {
    let payload = serde_json::json!({
        "backend": backend_id,
        "repetition": repetition,
        "temperature": params.temperature,
        "max_tokens": params.max_tokens,
        "messages": bundle.messages,
    });
    let bytes = serde_json::to_vec(&payload).expect("cache key serialization");
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// In-memory completion cache, keyed by [`cache_key`].
#[derive(Debug, Default)]
pub struct CompletionCache {
    map: Mutex<HashMap<String, String>>,
    hits: AtomicU64,
}

impl CompletionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let found = self.map.lock().expect("cache lock").get(key).cloned();
        if found.is_some() {
            self.hits.fetch_add(1, Ordering::Relaxed);
        }
        found
    }

    pub fn insert(&self, key: String, value: String) {
        self.map.lock().expect("cache lock").insert(key, value);
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }
}

fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// A backend bound to one repetition of one experiment cell: routes calls to
/// the underlying provider, records every call in the transcript, and
/// consults the cache when enabled.
#[derive(Clone)]
pub struct BackendHandle {
    backend: Arc<dyn ChatBackend>,
    params: DecodeParams,
    repetition: u32,
    transcript: TranscriptSink,
    cache: Option<Arc<CompletionCache>>,
}

impl BackendHandle {
    pub fn new(
        backend: Arc<dyn ChatBackend>,
        params: DecodeParams,
        repetition: u32,
        transcript: TranscriptSink,
    ) -> Self {
        Self {
            backend,
            params,
            repetition,
            transcript,
            cache: None,
        }
    }

    pub fn with_cache(mut self, cache: Arc<CompletionCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn id(&self) -> &str {
        self.backend.id()
    }

    pub fn repetition(&self) -> u32 {
        self.repetition
    }

    pub fn complete(&self, bundle: &PromptBundle) -> Result<String, BackendError> {
        self.complete_attempt(bundle, 1)
    }

    /// `attempt` > 1 marks a parse retry: it bypasses the cache read (a
    /// cached bad response would never heal) and is flagged in the
    /// transcript.
    pub fn complete_attempt(
        &self,
        bundle: &PromptBundle,
        attempt: u32,
    ) -> Result<String, BackendError> {
        bundle.validate()?;
        let ts = unix_ms();
        let key = self
            .cache
            .as_ref()
            .map(|_| cache_key(bundle, &self.params, self.backend.id(), self.repetition));

        if attempt == 1 {
            if let (Some(cache), Some(key)) = (&self.cache, &key) {
                if let Some(text) = cache.get(key) {
                    self.transcript.append(TranscriptEntry {
                        ts,
                        backend: self.backend.id().to_string(),
                        repetition: self.repetition,
                        task_kind: bundle.descriptor.task_kind,
                        messages: bundle.messages.clone(),
                        response: text.clone(),
                        attempt,
                        latency_ms: 0,
                        cache_hit: true,
                        error: None,
                    });
                    return Ok(text);
                }
            }
        }

        let started = Instant::now();
        let result = self.backend.complete(bundle, &self.params).and_then(|text| {
            if text.trim().is_empty() {
                Err(BackendError::EmptyCompletion)
            } else {
                Ok(text)
            }
        });
        let latency_ms = started.elapsed().as_millis() as u64;

        self.transcript.append(TranscriptEntry {
            ts,
            backend: self.backend.id().to_string(),
            repetition: self.repetition,
            task_kind: bundle.descriptor.task_kind,
            messages: bundle.messages.clone(),
            response: result.as_ref().cloned().unwrap_or_default(),
            attempt,
            latency_ms,
            cache_hit: false,
            error: result.as_ref().err().map(ToString::to_string),
        });

        if let (Ok(text), Some(cache), Some(key)) = (&result, &self.cache, key) {
            cache.insert(key, text.clone());
        }
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    struct CountingBackend {
        calls: AtomicUsize,
    }

    impl ChatBackend for CountingBackend {
        fn id(&self) -> &str {
            "counting"
        }

        fn complete(
            &self,
            _bundle: &PromptBundle,
            _params: &DecodeParams,
        ) -> Result<String, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok("[1, 2]".into())
        }
    }

    fn rank_bundle() -> PromptBundle {
        PromptBundle {
            messages: vec![ChatMessage::user("rank these")],
            descriptor: TaskDescriptor::new(TaskKind::Rank, vec![ItemId(1), ItemId(2)], None)
                .unwrap(),
        }
    }

    #[test]
    fn descriptor_aux_rules() {
        assert!(TaskDescriptor::new(TaskKind::Rank, vec![ItemId(1)], None).is_ok());
        assert!(TaskDescriptor::new(TaskKind::Reflect, vec![ItemId(1)], None).is_err());
        assert!(TaskDescriptor::new(
            TaskKind::Rank,
            vec![ItemId(1)],
            Some(TaskAux::CurrentRanking {
                ordered: vec![ItemId(1)]
            })
        )
        .is_err());
        assert!(TaskDescriptor::new(
            TaskKind::Judge,
            vec![ItemId(1)],
            Some(TaskAux::CurrentRanking {
                ordered: vec![ItemId(1)]
            })
        )
        .is_err());
        assert!(TaskDescriptor::new(TaskKind::Rank, vec![], None).is_err());
    }

    #[test]
    fn cache_key_distinguishes_inputs() {
        let bundle = rank_bundle();
        let params = DecodeParams::default();
        let base = cache_key(&bundle, &params, "b", 1);
        assert_eq!(base, cache_key(&bundle, &params, "b", 1));
        assert_ne!(base, cache_key(&bundle, &params, "b", 2));
        assert_ne!(base, cache_key(&bundle, &params, "other", 1));
        let hot = DecodeParams {
            temperature: 0.7,
            ..DecodeParams::default()
        };
        assert_ne!(base, cache_key(&bundle, &hot, "b", 1));
        let mut other = bundle.clone();
        other.messages[0].content.push('!');
        assert_ne!(base, cache_key(&other, &params, "b", 1));
    }

    #[test]
    fn second_identical_call_served_from_cache() {
        let backend = Arc::new(CountingBackend {
            calls: AtomicUsize::new(0),
        });
        let cache = Arc::new(CompletionCache::new());
        let sink = TranscriptSink::new();
        let handle = BackendHandle::new(
            backend.clone(),
            DecodeParams::default(),
            1,
            sink.clone(),
        )
        .with_cache(cache.clone());

        let bundle = rank_bundle();
        assert_eq!(handle.complete(&bundle).unwrap(), "[1, 2]");
        assert_eq!(handle.complete(&bundle).unwrap(), "[1, 2]");
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
        assert_eq!(cache.hits(), 1);
        let entries = sink.entries();
        assert_eq!(entries.len(), 2);
        assert!(!entries[0].cache_hit);
        assert!(entries[1].cache_hit);
    }

    #[test]
    fn retry_attempt_bypasses_cache_read() {
        let backend = Arc::new(CountingBackend {
            calls: AtomicUsize::new(0),
        });
        let cache = Arc::new(CompletionCache::new());
        let handle = BackendHandle::new(
            backend.clone(),
            DecodeParams::default(),
            1,
            TranscriptSink::new(),
        )
        .with_cache(cache);

        let bundle = rank_bundle();
        handle.complete(&bundle).unwrap();
        handle.complete_attempt(&bundle, 2).unwrap();
        assert_eq!(backend.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn repetitions_do_not_share_cache_entries() {
        let backend = Arc::new(CountingBackend {
            calls: AtomicUsize::new(0),
        });
        let cache = Arc::new(CompletionCache::new());
        let bundle = rank_bundle();
        for rep in 1..=3 {
            let handle = BackendHandle::new(
                backend.clone(),
                DecodeParams::default(),
                rep,
                TranscriptSink::new(),
            )
            .with_cache(cache.clone());
            handle.complete(&bundle).unwrap();
        }
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
        assert_eq!(cache.hits(), 0);
    }

    #[test]
    fn empty_message_rejected_before_dispatch() {
        let backend = Arc::new(CountingBackend {
            calls: AtomicUsize::new(0),
        });
        let handle = BackendHandle::new(
            backend.clone(),
            DecodeParams::default(),
            1,
            TranscriptSink::new(),
        );
        let mut bundle = rank_bundle();
        bundle.messages[0].content = "   ".into();
        assert!(matches!(
            handle.complete(&bundle),
            Err(BackendError::EmptyMessage)
        ));
        assert_eq!(backend.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn transcript_counts_protocol_calls_separately() {
        let backend = Arc::new(CountingBackend {
            calls: AtomicUsize::new(0),
        });
        let sink = TranscriptSink::new();
        let handle =
            BackendHandle::new(backend, DecodeParams::default(), 1, sink.clone());
        let bundle = rank_bundle();
        handle.complete(&bundle).unwrap();
        handle.complete_attempt(&bundle, 2).unwrap();
        handle.complete(&bundle).unwrap();
        assert_eq!(sink.len(), 3);
        assert_eq!(sink.protocol_calls(), 2);
    }
}
