//! Orchestration of the offline-RL glycemia workflow: data generation,
//! population training, in-silico and FQE evaluation, patient-wise
//! personalization, analyses and reports.

pub mod analysis;
pub mod cohort;
pub mod commands;
pub mod config;
pub mod evaluation;
pub mod personalize;
pub mod rollout;

pub use config::{CohortConfig, RunConfig, ScenarioConfig};

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    Missing(String),
    #[error("policy failure: {0}")]
    Policy(String),
    #[error("data hygiene violation: {0}")]
    Hygiene(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Agent(#[from] glyrl_agents::AgentError),
    #[error(transparent)]
    Core(#[from] glyrl_core::CoreError),
    #[error(transparent)]
    Sim(#[from] glyrl_sim::SimError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
