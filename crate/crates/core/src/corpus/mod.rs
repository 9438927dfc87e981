//! Instruction-dataset construction from public rating dumps.
//!
//! Ratings are grouped per user, sorted by recency, split into preferred and
//! non-preferred items by a rating threshold, and rendered through task-specific
//! prompt templates into [`InstructionSample`]s.

mod ingest;
mod synth;
pub(crate) mod templates;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ingest::{build_histories, load_ratings, ColumnMapping, LoadReport};
pub use synth::{
    ensure_demographics, split_by_threshold, synthesize_dataset, user_rng, user_seed, ItemLimit,
    ItemSampling, SkipReason, SynthesisConfig, SynthesisOutput,
};
pub use templates::{
    default_registry, load_registry, registry_digest, render_prompt, PromptTemplate, RenderInputs,
    PROFILE_PHRASE,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed rating dump: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing mapped column `{0}`")]
    MissingColumn(String),
    #[error("invalid template `{id}`: {reason}")]
    InvalidTemplate { id: String, reason: String },
    #[error("template registry: {0}")]
    Registry(String),
    #[error("no templates registered for task {0}")]
    EmptyTaskPool(TaskType),
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }

    /// Lenient parse used for rating dumps (`M`, `male`, `F`, `Female`, ...).
    pub fn parse_loose(s: &str) -> Option<Gender> {
        match s.trim().to_ascii_lowercase().as_str() {
            "m" | "male" => Some(Gender::Male),
            "f" | "female" => Some(Gender::Female),
            _ => None,
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Profile {
    pub age: u32,
    pub gender: Gender,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemographicsSource {
    Recorded,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub age: u32,
    pub gender: Gender,
    pub source: DemographicsSource,
}

impl Demographics {
    pub fn profile(&self) -> Profile {
        Profile { age: self.age, gender: self.gender }
    }
}

/// One row of a public rating dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub user_id: String,
    pub item_id: String,
    pub item_title: String,
    pub rating: f64,
    pub timestamp: Option<i64>,
    pub age: Option<u32>,
    pub gender: Option<Gender>,
}

/// A user's records, most recent first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: String,
    pub records: Vec<RatingRecord>,
    /// `None` until recorded values are found or [`ensure_demographics`] fills them in.
    pub demographics: Option<Demographics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    BinaryClassification,
    Direct,
    Sequential,
    RatingPrediction,
    ColdStart,
}

impl TaskType {
    pub const ALL: [TaskType; 5] = [
        TaskType::BinaryClassification,
        TaskType::Direct,
        TaskType::Sequential,
        TaskType::RatingPrediction,
        TaskType::ColdStart,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::BinaryClassification => "binary_classification",
            TaskType::Direct => "direct",
            TaskType::Sequential => "sequential",
            TaskType::RatingPrediction => "rating_prediction",
            TaskType::ColdStart => "cold_start",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskType {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        match key.as_str() {
            "binary_classification" | "binary" => Ok(TaskType::BinaryClassification),
            "direct" => Ok(TaskType::Direct),
            "sequential" => Ok(TaskType::Sequential),
            "rating_prediction" | "rating" => Ok(TaskType::RatingPrediction),
            "cold_start" | "coldstart" => Ok(TaskType::ColdStart),
            _ => Err(CorpusError::UnknownTask(s.to_string())),
        }
    }
}

/// The four prompt segments; their ordered concatenation is the full prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSegments {
    pub task_instruction: String,
    pub context: String,
    pub profile: String,
    pub item_history: String,
}

impl PromptSegments {
    pub fn concat(&self) -> String {
        [&self.task_instruction, &self.context, &self.profile, &self.item_history]
            .iter()
            .map(|s| s.as_str())
            .collect()
    }
}

/// A rendered instruction prompt together with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub sample_id: String,
    pub prompt: String,
    pub segments: PromptSegments,
    pub ground_truth_titles: Vec<String>,
    pub profile: Profile,
    /// Whether the demographic phrase was rendered (ProfileMatch eligibility).
    pub profile_rendered: bool,
    pub template_id: String,
    pub task_type: TaskType,
    pub user_id: String,
    /// The item limit `n` drawn for this sample.
    pub n_items: usize,
}
