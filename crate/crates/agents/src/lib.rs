//! Offline reinforcement learning from logged insulin data: TD3-BC, BCQ and
//! CQL learners, serialized policy artifacts, and fitted Q evaluation.
//!
//! Nothing here knows about the simulator; policies are trained and evaluated
//! from [`glyrl_core::Dataset`]s only.

pub mod artifact;
pub mod config;
pub mod data;
pub mod fqe;
pub mod learner;
pub mod toy;
pub mod train;

pub use artifact::{Policy, PolicyArtifact};
pub use config::{AgentConfig, Algorithm};
pub use data::{action_from_unit, action_to_unit, Transitions};
pub use fqe::{estimate_metric, fqe_train, rank_policies, Estimate, EstimateRecord, FqeConfig, FqeModel, RankedPolicy};
pub use learner::{Learner, Losses, Targets};
pub use toy::{TablePolicy, ToyMdp};
pub use train::{train, CurveRow, TrainOutcome};

use glyrl_core::CoreError;
use glyrl_nn::{ContainerError, NnError};

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error("training diverged at step {step}: mean |Q| = {q_mean:.3e}")]
    Diverged { step: u64, q_mean: f64 },
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: u64 },
    #[error("artifact format: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = AgentError> = std::result::Result<T, E>;

/// Upper bound of the agent's insulin rate, U/h.
pub const MAX_RATE: f64 = 10.0;
