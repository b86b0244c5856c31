//! Data-side building blocks shared by the simulator, the agents and the pipeline:
//! clinical metrics, reward functions, episode logs, state features and datasets.

pub mod dataset;
pub mod episode;
pub mod features;
pub mod metrics;
pub mod reward;

pub use dataset::{Dataset, DatasetConfig, DatasetSummary, ExclusionCounts, Split};
pub use episode::{EpisodeLog, EpisodeMeta, MealEvent, StepFlags, StepRecord};
pub use features::{FeatureConfig, Normalizer, StateVector};
pub use metrics::{compute_metrics, ClinicalMetrics};
pub use reward::{reward, RewardKind};

use glyrl_nn::ContainerError;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("unknown {what} tag `{tag}`")]
    UnknownTag { what: &'static str, tag: String },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
