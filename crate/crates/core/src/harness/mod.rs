//! Training, evaluation and experiment drivers.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod experiments;
pub mod oracle;
pub mod stats;
pub mod train;

use crate::gridworld::TaskType;
use crate::intention::{build_vocabulary, task_keywords, IntentionVocabulary};

pub use config::{ExperimentConfig, ModelSection, Toggles, TrainSection};
pub use dataset::{read_dataset, write_dataset, Corpus, Dataset, DatasetHeader, StepSource};
pub use eval::{evaluate, EvalSummary, Policy};
pub use train::{train, CurvePoint, TrainOutcome};

/// Keyword vocabulary over every task's oracle intention, in task order.
pub fn intention_vocabulary() -> IntentionVocabulary {
    let corpus: Vec<Vec<&str>> = TaskType::ALL.iter().map(|&t| task_keywords(t)).collect();
    build_vocabulary(&corpus).expect("task keywords are non-empty")
}
