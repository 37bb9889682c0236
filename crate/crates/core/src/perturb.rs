//! Bias suite construction: position (shuffled presentation), wording
//! (formal/casual/neutral restyles), and verbosity (relevant/irrelevant
//! lengthening). All variants keep ids and belief percentages untouched, so
//! ground truth is preserved by construction.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    BackendError, BackendHandle, ChatMessage, PromptBundle, TaskAux, TaskDescriptor, TaskKind,
};
use crate::domain::{ConspiracyTheory, Dataset, DomainError, ItemId, VariantKind};

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("item {id} has no {kind} variant and no rephraser backend was supplied")]
    MissingVariant { id: ItemId, kind: VariantKind },
    #[error("rephraser returned empty text for item {id} ({kind})")]
    RephraserEmpty { id: ItemId, kind: VariantKind },
    #[error("rephraser failed for item {id} ({kind}): {source}")]
    Rephraser {
        id: ItemId,
        kind: VariantKind,
        #[source]
        source: BackendError,
    },
    #[error("item {id}: {kind} text has {got} words, not longer than the original's {base}")]
    VerboseNotLonger {
        id: ItemId,
        kind: VariantKind,
        got: usize,
        base: usize,
    },
    #[error("cannot produce {requested} distinct non-identity permutations of {n} items")]
    NotEnoughPermutations { requested: usize, n: usize },
    #[error("permutation sampling exhausted its attempt budget")]
    SamplingExhausted,
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("failed to write suite file {path}: {detail}")]
    Export { path: String, detail: String },
}

/// Which prompt property a suite perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasKind {
    Position,
    Wording,
    Verbosity,
}

impl BiasKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BiasKind::Position => "position",
            BiasKind::Wording => "wording",
            BiasKind::Verbosity => "verbosity",
        }
    }
}

impl std::fmt::Display for BiasKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

/// One perturbed dataset with its sub-variant label ("formal", "relevant",
/// "03", ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteVariant {
    pub label: String,
    pub dataset: Dataset,
}

/// A family of perturbed datasets sharing the base dataset's ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSuite {
    pub kind: BiasKind,
    pub base: Dataset,
    pub variants: Vec<SuiteVariant>,
    /// Shuffle seed; only position suites use one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl BiasSuite {
    /// Total number of item slots across variants, the suite-size figure
    /// used in dataset statistics.
    pub fn item_slots(&self) -> usize {
        self.variants.iter().map(|v| v.dataset.len()).sum()
    }
}

/// Provides restyled item texts when the dataset file does not carry them.
pub trait Rephraser {
    fn rephrase(&self, id: ItemId, text: &str, style: VariantKind)
        -> Result<String, PerturbError>;
}

/// Prompt sent to LLM rephrasers; `{style}` is the variant label and the
/// statement follows the colon.
pub const REPHRASE_TEMPLATE: &str =
    "Rephrase the following statement in a {style} tone without adding or removing facts: {text}";

fn style_word(kind: VariantKind) -> &'static str {
    match kind {
        VariantKind::Formal => "formal",
        VariantKind::Casual => "casual",
        VariantKind::Neutral => "neutral",
        VariantKind::VerboseRelevant => "verbose, contextually relevant",
        VariantKind::VerboseIrrelevant => "verbose, contextually irrelevant",
    }
}

/// Rephrases through a chat backend, so generated variants land in the run
/// transcript like any other completion.
pub struct BackendRephraser<'a> {
    handle: &'a BackendHandle,
}

impl<'a> BackendRephraser<'a> {
    pub fn new(handle: &'a BackendHandle) -> Self {
        Self { handle }
    }
}

impl Rephraser for BackendRephraser<'_> {
    fn rephrase(
        &self,
        id: ItemId,
        text: &str,
        style: VariantKind,
    ) -> Result<String, PerturbError> {
        let rendered = REPHRASE_TEMPLATE
            .replace("{style}", style_word(style))
            .replace("{text}", text);
        let descriptor = TaskDescriptor::new(
            TaskKind::Rephrase,
            vec![id],
            Some(TaskAux::RephraseInput {
                style,
                original: text.to_string(),
            }),
        )
        .map_err(|source| PerturbError::Rephraser {
            id,
            kind: style,
            source,
        })?;
        let bundle = PromptBundle {
            messages: vec![ChatMessage::user(rendered)],
            descriptor,
        };
        self.handle
            .complete(&bundle)
            .map_err(|source| PerturbError::Rephraser {
                id,
                kind: style,
                source,
            })
    }
}

fn factorial_saturating(n: usize) -> u128 {
    let mut acc: u128 = 1;
    for k in 2..=n as u128 {
        acc = acc.saturating_mul(k);
    }
    acc
}

fn all_orderings(ids: &[ItemId]) -> Vec<Vec<ItemId>> {
    if ids.len() <= 1 {
        return vec![ids.to_vec()];
    }
    let mut out = Vec::new();
    for (i, &head) in ids.iter().enumerate() {
        let mut rest = ids.to_vec();
        rest.remove(i);
        for mut tail in all_orderings(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

/// Builds `count` datasets that differ from the base only in presentation
/// order: seeded uniform shuffles, deduplicated against the base order and
/// each other. The identity ordering never appears (it is the baseline run).
pub fn build_position_suite(
    base: &Dataset,
    count: usize,
    seed: u64,
) -> Result<BiasSuite, PerturbError> {
    let n = base.len();
    let available = factorial_saturating(n).saturating_sub(1);
    if count == 0 || count as u128 > available {
        return Err(PerturbError::NotEnoughPermutations { requested: count, n });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut orders: Vec<Vec<ItemId>> = Vec::with_capacity(count);

    if factorial_saturating(n) <= 40_320 {
        // Small n: enumerate every non-identity ordering and sample without
        // replacement; same distribution as rejection, no retry loop.
        let mut pool: Vec<Vec<ItemId>> = all_orderings(&base.presentation_order)
            .into_iter()
            .filter(|o| *o != base.presentation_order)
            .collect();
        pool.shuffle(&mut rng);
        orders.extend(pool.into_iter().take(count));
    } else {
        let mut attempts = 0usize;
        let budget = 10_000 + 100 * count;
        let mut candidate = base.presentation_order.clone();
        while orders.len() < count {
            attempts += 1;
            if attempts > budget {
                return Err(PerturbError::SamplingExhausted);
            }
            candidate.shuffle(&mut rng);
            if candidate != base.presentation_order && !orders.contains(&candidate) {
                orders.push(candidate.clone());
            }
        }
    }

    let variants = orders
        .into_iter()
        .enumerate()
        .map(|(i, order)| {
            let label = format!("{:02}", i + 1);
            let mut dataset = base.with_presentation_order(order)?;
            dataset.name = format!("{}_position_{label}", base.name);
            Ok(SuiteVariant { label, dataset })
        })
        .collect::<Result<Vec<_>, PerturbError>>()?;

    Ok(BiasSuite {
        kind: BiasKind::Position,
        base: base.clone(),
        variants,
        seed: Some(seed),
    })
}

fn restyled_dataset(
    base: &Dataset,
    kind: VariantKind,
    rephraser: Option<&dyn Rephraser>,
    require_longer: bool,
) -> Result<Dataset, PerturbError> {
    let mut items = Vec::with_capacity(base.len());
    for item in &base.items {
        let text = match item.variants.get(&kind) {
            Some(text) => text.clone(),
            None => match rephraser {
                Some(r) => {
                    let text = r.rephrase(item.id, &item.text, kind)?;
                    if text.trim().is_empty() {
                        return Err(PerturbError::RephraserEmpty { id: item.id, kind });
                    }
                    if text.trim() == item.text.trim() {
                        log::warn!(
                            "rephraser returned text identical to the original for item {} ({kind})",
                            item.id
                        );
                    }
                    text
                }
                None => return Err(PerturbError::MissingVariant { id: item.id, kind }),
            },
        };
        if require_longer {
            let base_words = item.text.split_whitespace().count();
            let got = text.split_whitespace().count();
            if got <= base_words {
                return Err(PerturbError::VerboseNotLonger {
                    id: item.id,
                    kind,
                    got,
                    base: base_words,
                });
            }
        }
        items.push(ConspiracyTheory {
            id: item.id,
            text,
            belief_pct: item.belief_pct,
            variants: Default::default(),
        });
    }
    let mut dataset = Dataset::new(base.name.clone(), items)?;
    dataset = dataset.with_presentation_order(base.presentation_order.clone())?;
    Ok(dataset)
}

/// Three datasets substituting each item's text with its formal, casual,
/// and neutral restyles.
pub fn build_wording_suite(
    base: &Dataset,
    rephraser: Option<&dyn Rephraser>,
) -> Result<BiasSuite, PerturbError> {
    let variants = VariantKind::WORDING
        .iter()
        .enumerate()
        .map(|(i, kind)| {
            let mut dataset = restyled_dataset(base, *kind, rephraser, false)?;
            dataset.name = format!("{}_wording_{}", base.name, i + 1);
            Ok(SuiteVariant {
                label: kind.label().to_string(),
                dataset,
            })
        })
        .collect::<Result<Vec<_>, PerturbError>>()?;
    Ok(BiasSuite {
        kind: BiasKind::Wording,
        base: base.clone(),
        variants,
        seed: None,
    })
}

/// Two datasets with contextually relevant and irrelevant lengthening;
/// every verbose text must be strictly longer (in words) than the original.
pub fn build_verbosity_suite(
    base: &Dataset,
    rephraser: Option<&dyn Rephraser>,
) -> Result<BiasSuite, PerturbError> {
    let variants = VariantKind::VERBOSITY
        .iter()
        .enumerate()
        .map(|(i, kind)| {
            let mut dataset = restyled_dataset(base, *kind, rephraser, true)?;
            dataset.name = format!("{}_verbosity_{}", base.name, i + 1);
            Ok(SuiteVariant {
                label: kind.label().to_string(),
                dataset,
            })
        })
        .collect::<Result<Vec<_>, PerturbError>>()?;
    Ok(BiasSuite {
        kind: BiasKind::Verbosity,
        base: base.clone(),
        variants,
        seed: None,
    })
}

/// Index entry written next to exported suite files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub base: String,
    pub kind: BiasKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub files: Vec<String>,
    pub labels: Vec<String>,
}

/// Writes each variant as `{base}_{kind}_{index}.json` plus a manifest
/// naming the members and the seed. Returns the manifest.
pub fn export_suite(suite: &BiasSuite, dir: &Path) -> Result<SuiteManifest, PerturbError> {
    std::fs::create_dir_all(dir).map_err(|e| PerturbError::Export {
        path: dir.display().to_string(),
        detail: e.to_string(),
    })?;
    let mut files = Vec::new();
    let mut labels = Vec::new();
    for (i, variant) in suite.variants.iter().enumerate() {
        let file_name = format!("{}_{}_{}.json", suite.base.name, suite.kind, i + 1);
        let path = dir.join(&file_name);
        let json = variant.dataset.to_file_json()?;
        std::fs::write(&path, json).map_err(|e| PerturbError::Export {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        files.push(file_name);
        labels.push(variant.label.clone());
    }
    let manifest = SuiteManifest {
        base: suite.base.name.clone(),
        kind: suite.kind,
        seed: suite.seed,
        files,
        labels,
    };
    let manifest_path = dir.join(format!("{}_{}_manifest.json", suite.base.name, suite.kind));
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serialization");
    std::fs::write(&manifest_path, body + "\n").map_err(|e| PerturbError::Export {
        path: manifest_path.display().to_string(),
        detail: e.to_string(),
    })?;
    Ok(manifest)
}
