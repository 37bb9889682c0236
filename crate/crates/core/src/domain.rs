//! Core data model: ranked items, datasets, ground truth, rankings, and
//! experiment configuration.
//!
//! Everything here is immutable after construction and safe to share across
//! threads. Ground truth is derived from per-item belief percentages rather
//! than stored separately, so perturbed dataset variants keep their labels
//! for free.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Stable 1-based identifier of a conspiracy theory within a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Default)]
#[serde(transparent)]
pub struct ItemId(pub u32);

// Hand-rolled so ids deserialize both from integers and from the string
// keys JSON forces onto id-keyed maps.
impl<'de> Deserialize<'de> for ItemId {
    fn deserialize<D>(deserializer: D) -> Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        struct IdVisitor;

        impl serde::de::Visitor<'_> for IdVisitor {
            type Value = ItemId;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an item id as an integer or a numeric string")
            }

            fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<ItemId, E> {
                u32::try_from(v)
                    .map(ItemId)
                    .map_err(|_| E::custom(format!("item id {v} out of range")))
            }

            fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<ItemId, E> {
                u32::try_from(v)
                    .map(ItemId)
                    .map_err(|_| E::custom(format!("item id {v} out of range")))
            }

            fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<ItemId, E> {
                v.parse()
                    .map(ItemId)
                    .map_err(|_| E::custom(format!("item id '{v}' is not an integer")))
            }
        }

        deserializer.deserialize_any(IdVisitor)
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for ItemId {
    fn from(v: u32) -> Self {
        ItemId(v)
    }
}

/// Stylistic rewrite categories used by the wording and verbosity bias suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Formal,
    Casual,
    Neutral,
    VerboseRelevant,
    VerboseIrrelevant,
}

impl VariantKind {
    pub const ALL: [VariantKind; 5] = [
        VariantKind::Formal,
        VariantKind::Casual,
        VariantKind::Neutral,
        VariantKind::VerboseRelevant,
        VariantKind::VerboseIrrelevant,
    ];

    /// The three meaning-preserving style rewrites.
    pub const WORDING: [VariantKind; 3] = [
        VariantKind::Formal,
        VariantKind::Casual,
        VariantKind::Neutral,
    ];

    /// The two lengthened rewrites.
    pub const VERBOSITY: [VariantKind; 2] =
        [VariantKind::VerboseRelevant, VariantKind::VerboseIrrelevant];

    pub fn label(self) -> &'static str {
        match self {
            VariantKind::Formal => "formal",
            VariantKind::Casual => "casual",
            VariantKind::Neutral => "neutral",
            VariantKind::VerboseRelevant => "relevant",
            VariantKind::VerboseIrrelevant => "irrelevant",
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.label())
    }
}

/// One ranked item: a conspiracy theory statement with the fraction of survey
/// respondents who believe it, plus optional pre-authored rewrites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConspiracyTheory {
    pub id: ItemId,
    pub text: String,
    /// Percentage of respondents believing the statement, in `[0, 100]`.
    pub belief_pct: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub variants: BTreeMap<VariantKind, String>,
}

impl ConspiracyTheory {
    pub fn new(id: u32, text: impl Into<String>, belief_pct: f64) -> Self {
        Self {
            id: ItemId(id),
            text: text.into(),
            belief_pct,
            variants: BTreeMap::new(),
        }
    }

    pub fn with_variant(mut self, kind: VariantKind, text: impl Into<String>) -> Self {
        self.variants.insert(kind, text.into());
        self
    }
}

/// Errors raised while loading or validating datasets.
#[derive(Debug, Error)]
pub enum DomainError {
    #[error("failed to read dataset file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dataset JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("duplicate item id {0}")]
    DuplicateId(ItemId),
    #[error("item ids are 1-based; id 0 is not allowed")]
    ZeroId,
    #[error("item {0}: text is empty")]
    EmptyText(ItemId),
    #[error("item {id}: belief_pct {value} outside [0, 100]")]
    BeliefOutOfRange { id: ItemId, value: f64 },
    #[error("item {id}: {kind} variant text is empty")]
    EmptyVariant { id: ItemId, kind: VariantKind },
    #[error("dataset must contain at least 2 items, found {0}")]
    TooFewItems(usize),
    #[error("presentation order is not a permutation of the item ids: {0}")]
    BadPresentationOrder(String),
}

/// On-disk shape of a dataset file. Presentation order is the file order.
#[derive(Debug, Serialize, Deserialize)]
struct DatasetFile {
    name: String,
    items: Vec<ConspiracyTheory>,
}

/// A named collection of items together with the order they are presented in
/// prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub items: Vec<ConspiracyTheory>,
    /// Permutation of all item ids; position 0 is rendered first.
    pub presentation_order: Vec<ItemId>,
}

impl Dataset {
    /// Builds a dataset presenting items in the given list order.
    pub fn new(name: impl Into<String>, items: Vec<ConspiracyTheory>) -> Result<Self, DomainError> {
        let presentation_order = items.iter().map(|it| it.id).collect();
        let ds = Self {
            name: name.into(),
            items,
            presentation_order,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Same items, different presentation order.
    pub fn with_presentation_order(&self, order: Vec<ItemId>) -> Result<Self, DomainError> {
        let ds = Self {
            name: self.name.clone(),
            items: self.items.clone(),
            presentation_order: order,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Item ids in canonical (items-list) order.
    pub fn ids(&self) -> Vec<ItemId> {
        self.items.iter().map(|it| it.id).collect()
    }

    pub fn item(&self, id: ItemId) -> Option<&ConspiracyTheory> {
        self.items.iter().find(|it| it.id == id)
    }

    /// Items in presentation order.
    pub fn presented_items(&self) -> Vec<&ConspiracyTheory> {
        self.presentation_order
            .iter()
            .filter_map(|id| self.item(*id))
            .collect()
    }

    fn validate(&self) -> Result<(), DomainError> {
        if self.items.len() < 2 {
            return Err(DomainError::TooFewItems(self.items.len()));
        }
        let mut seen = BTreeSet::new();
        for item in &self.items {
            if item.id.0 == 0 {
                return Err(DomainError::ZeroId);
            }
            if !seen.insert(item.id) {
                return Err(DomainError::DuplicateId(item.id));
            }
            if item.text.trim().is_empty() {
                return Err(DomainError::EmptyText(item.id));
            }
            if !(0.0..=100.0).contains(&item.belief_pct) || item.belief_pct.is_nan() {
                return Err(DomainError::BeliefOutOfRange {
                    id: item.id,
                    value: item.belief_pct,
                });
            }
            for (kind, text) in &item.variants {
                if text.trim().is_empty() {
                    return Err(DomainError::EmptyVariant {
                        id: item.id,
                        kind: *kind,
                    });
                }
            }
        }
        let presented: BTreeSet<ItemId> = self.presentation_order.iter().copied().collect();
        if presented != seen || self.presentation_order.len() != self.items.len() {
            return Err(DomainError::BadPresentationOrder(format!(
                "{} ids presented, {} ids in dataset",
                self.presentation_order.len(),
                self.items.len()
            )));
        }
        Ok(())
    }

    /// Serializes to the dataset file format, writing items in presentation
    /// order so that a round-trip preserves it.
    pub fn to_file_json(&self) -> Result<String, DomainError> {
        let file = DatasetFile {
            name: self.name.clone(),
            items: self.presented_items().into_iter().cloned().collect(),
        };
        let mut out = serde_json::to_string_pretty(&file)?;
        out.push('\n');
        Ok(out)
    }
}

/// Human-annotated impact ranks: rank 1 is the most impactful item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub ranks: BTreeMap<ItemId, u32>,
}

impl GroundTruth {
    pub fn n(&self) -> usize {
        self.ranks.len()
    }

    pub fn rank_of(&self, id: ItemId) -> Option<u32> {
        self.ranks.get(&id).copied()
    }

    pub fn ids(&self) -> Vec<ItemId> {
        self.ranks.keys().copied().collect()
    }

    /// Ids sorted from rank 1 to rank n: the ideal ordering.
    pub fn ideal_order(&self) -> Vec<ItemId> {
        let mut pairs: Vec<(u32, ItemId)> =
            self.ranks.iter().map(|(id, r)| (*r, *id)).collect();
        pairs.sort();
        pairs.into_iter().map(|(_, id)| id).collect()
    }
}

/// Ranks items by descending belief percentage; ties break toward the lower
/// id so derived ground truth is deterministic.
pub fn derive_ground_truth(dataset: &Dataset) -> GroundTruth {
    let mut order: Vec<&ConspiracyTheory> = dataset.items.iter().collect();
    order.sort_by(|a, b| {
        b.belief_pct
            .partial_cmp(&a.belief_pct)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.id.cmp(&b.id))
    });
    let ranks = order
        .iter()
        .enumerate()
        .map(|(i, it)| (it.id, (i + 1) as u32))
        .collect();
    GroundTruth { ranks }
}

/// Loads and validates a dataset file, returning it together with the ground
/// truth derived from belief percentages.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<(Dataset, GroundTruth), DomainError> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|source| DomainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: DatasetFile = serde_json::from_str(&raw)?;
    let dataset = Dataset::new(file.name, file.items)?;
    let truth = derive_ground_truth(&dataset);
    Ok((dataset, truth))
}

/// Identifies where a ranking came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetition: Option<u32>,
}

/// A predicted impact ordering: position 0 is judged most impactful.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub ordered: Vec<ItemId>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl Ranking {
    pub fn new(ordered: Vec<ItemId>) -> Self {
        Self {
            ordered,
            provenance: Provenance::default(),
        }
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// 1-based rank of an item, if present.
    pub fn rank_of(&self, id: ItemId) -> Option<u32> {
        self.ordered
            .iter()
            .position(|x| *x == id)
            .map(|p| (p + 1) as u32)
    }

    pub fn reversed(&self) -> Ranking {
        let mut ordered = self.ordered.clone();
        ordered.reverse();
        Ranking {
            ordered,
            provenance: self.provenance.clone(),
        }
    }
}

/// Outcome of checking a ranking against a dataset's id set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RankingVerdict {
    Valid,
    Invalid(String),
}

impl RankingVerdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, RankingVerdict::Valid)
    }
}

/// Accepts a ranking iff it is exactly a permutation of the dataset's ids.
pub fn validate_ranking(ranking: &Ranking, dataset: &Dataset) -> RankingVerdict {
    let expected: BTreeSet<ItemId> = dataset.ids().into_iter().collect();
    let mut seen = BTreeSet::new();
    for id in &ranking.ordered {
        if !expected.contains(id) {
            return RankingVerdict::Invalid(format!("unknown id {id}"));
        }
        if !seen.insert(*id) {
            return RankingVerdict::Invalid(format!("duplicate id {id}"));
        }
    }
    if seen.len() != expected.len() {
        let missing: Vec<String> = expected
            .difference(&seen)
            .map(ToString::to_string)
            .collect();
        return RankingVerdict::Invalid(format!("missing id(s) {}", missing.join(", ")));
    }
    RankingVerdict::Valid
}

/// How pairwise comparisons are presented to the backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PairwiseOrderMode {
    /// One query per pair, lower id presented first.
    #[default]
    Single,
    /// Two queries per pair (both presentation orders) with per-pair majority.
    Both,
}

impl FromStr for PairwiseOrderMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(PairwiseOrderMode::Single),
            "both" => Ok(PairwiseOrderMode::Both),
            other => Err(format!("unknown pairwise order mode '{other}'")),
        }
    }
}

/// Knobs shared by every strategy run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// How many times each cell is repeated.
    pub repetitions: u32,
    /// Round cap T for the self-reflection loop.
    pub max_reflection_rounds: u32,
    pub max_debate_rounds: u32,
    pub pairwise_order_mode: PairwiseOrderMode,
    /// Extra attempts after an unparseable response before a hard failure.
    pub parse_retries: u32,
    pub rng_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            repetitions: 3,
            max_reflection_rounds: 3,
            max_debate_rounds: 3,
            pairwise_order_mode: PairwiseOrderMode::Single,
            parse_retries: 2,
            rng_seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.repetitions == 0 {
            return Err("repetitions must be >= 1".into());
        }
        if self.max_reflection_rounds == 0 {
            return Err("max_reflection_rounds must be >= 1".into());
        }
        if self.max_debate_rounds == 0 {
            return Err("max_debate_rounds must be >= 1".into());
        }
        Ok(())
    }
}
