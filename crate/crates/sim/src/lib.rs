//! Synthetic virtual patients and the insulin controllers driving them.

pub mod controllers;
pub mod glucosim;
pub mod runner;

pub use controllers::{
    apply_safety, behavior_action, bolus_calculator, hypo_risk, BehaviorConfig, PatientProxy, SafetyConfig,
};
pub use glucosim::{meal_schedule, sample_patient, step, MealConfig, PatientParams, SimState};
pub use runner::{run_episode, BehaviorController, ConstantRate, ControlAction, Controller, EpisodeOptions, Observation};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("negative input (rate {rate}, bolus {bolus}, carbs {carbs})")]
    NegativeInput { rate: f64, bolus: f64, carbs: f64 },
    #[error("invalid patient parameters: {0}")]
    InvalidParams(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
