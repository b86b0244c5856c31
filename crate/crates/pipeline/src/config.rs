//! The run configuration: one TOML file drives every subcommand.

use std::path::{Path, PathBuf};

use glyrl_agents::{AgentConfig, FqeConfig};
use glyrl_core::{DatasetConfig, RewardKind};
use glyrl_sim::glucosim::mix_seed;
use glyrl_sim::{sample_patient, BehaviorConfig, MealConfig, PatientParams, SafetyConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::AnalysisConfig;
use crate::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub n_patients: u32,
    /// Index of the first patient in the sampled population; cohorts with
    /// disjoint index ranges hold different patients.
    pub first_index: u32,
    pub days: u32,
    /// Insulin-sensitivity multipliers assigned to patients in turn; empty
    /// leaves the population unshifted. Therapy settings are not adapted.
    pub sensitivity_scales: Vec<f64>,
    /// Daily probability of one open-loop interval (coverage gap).
    pub open_loop_probability: f64,
    /// Gap length range, hours.
    pub open_loop_hours: [f64; 2],
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_patients: 5,
            first_index: 0,
            days: 60,
            sensitivity_scales: Vec::new(),
            open_loop_probability: 0.15,
            open_loop_hours: [1.0, 12.0],
        }
    }
}

impl CohortConfig {
    pub fn patient_ids(&self) -> Vec<u32> {
        (self.first_index..self.first_index + self.n_patients).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub announce_meals: bool,
    /// Safety layer plus automatic meal boluses around the learned basal policy.
    pub safety_on: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            announce_meals: true,
            safety_on: true,
        }
    }
}

impl ScenarioConfig {
    pub fn tag(&self) -> String {
        format!(
            "{}{}",
            if self.announce_meals { "announced" } else { "unannounced" },
            if self.safety_on { "" } else { "_nosafety" }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// In-silico evaluation horizon per patient.
    pub days: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { days: 14 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonalizationConfig {
    pub cohort: CohortConfig,
    pub fine_tune_steps: u64,
    pub checkpoint_every: u64,
    /// Fine-tuning learning rates relative to the population config.
    pub lr_scale: f64,
    /// Steps of each warm-started FQE when scanning checkpoints.
    pub warm_fqe_steps: u64,
    /// Steps of the per-patient FQE fits started from scratch.
    pub fqe_steps: u64,
    /// Patients with a shorter segment are skipped.
    pub min_segment_days: usize,
}

impl Default for PersonalizationConfig {
    fn default() -> Self {
        Self {
            cohort: CohortConfig {
                n_patients: 10,
                first_index: 1000,
                days: 32,
                sensitivity_scales: vec![0.7, 1.4],
                ..CohortConfig::default()
            },
            fine_tune_steps: 5000,
            checkpoint_every: 500,
            lr_scale: 0.1,
            warm_fqe_steps: 5000,
            fqe_steps: 20_000,
            min_segment_days: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stream (patients, meals, noise, gaps, training) is derived from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub cohort: CohortConfig,
    pub meals: MealConfig,
    pub behavior: BehaviorConfig,
    pub safety: SafetyConfig,
    pub dataset: DatasetConfig,
    pub agent: AgentConfig,
    pub fqe: FqeConfig,
    /// Chronological split fractions for held-out evaluation and personalization.
    pub split: Vec<f64>,
    pub eval: EvalConfig,
    pub scenario: ScenarioConfig,
    pub personalization: PersonalizationConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("run"),
            cohort: CohortConfig::default(),
            meals: MealConfig::default(),
            behavior: BehaviorConfig::default(),
            safety: SafetyConfig::default(),
            dataset: DatasetConfig::default(),
            agent: desk_scale_agent(),
            fqe: FqeConfig {
                hidden: vec![64, 64],
                steps: 100_000,
                ..FqeConfig::default()
            },
            split: vec![0.25; 4],
            eval: EvalConfig::default(),
            scenario: ScenarioConfig::default(),
            personalization: PersonalizationConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

/// TD3-BC tuned for a five-patient cohort on a laptop: a weaker BC term than
/// the literature's α = 2.5, smaller networks and a short run.
pub fn desk_scale_agent() -> AgentConfig {
    AgentConfig {
        alpha: 0.1,
        hidden: vec![64, 64],
        vae_hidden: vec![64, 64],
        steps: 20_000,
        ..AgentConfig::default()
    }
}

/// The reward kinds every FQE evaluation reports.
pub const METRIC_KINDS: [RewardKind; 3] = [RewardKind::TirIndicator, RewardKind::TbrIndicator, RewardKind::TarIndicator];

impl RunConfig {
    /// Keys present in `text` override the run defaults; partial tables keep
    /// the run defaults of their omitted keys (not the section type's).
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg_err = |e: &dyn std::fmt::Display| PipelineError::Config(e.to_string());
        let user: toml::Table = toml::from_str(text).map_err(|e| cfg_err(&e))?;
        let mut base = toml::Table::try_from(Self::default()).map_err(|e| cfg_err(&e))?;
        merge(&mut base, user);
        let cfg: Self = base.try_into().map_err(|e| cfg_err(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        for (name, c) in [("cohort", &self.cohort), ("personalization.cohort", &self.personalization.cohort),
            ("analysis.correlation_cohort", &self.analysis.correlation_cohort),
        ] {
            if c.days == 0 {
                return bad(format!("{name}.days must be positive"));
            }
            if !(0.0..=1.0).contains(&c.open_loop_probability) {
                return bad(format!("{name}.open_loop_probability must be in [0, 1]"));
            }
            let [lo, hi] = c.open_loop_hours;
            if !(lo >= 0.0 && hi >= lo && hi <= 24.0) {
                return bad(format!("{name}.open_loop_hours must satisfy 0 <= lo <= hi <= 24"));
            }
            if c.sensitivity_scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                return bad(format!("{name}.sensitivity_scales must be positive"));
            }
        }
        if self.cohort.n_patients == 0 {
            return bad("cohort.n_patients must be positive".into());
        }
        let total: f64 = self.split.iter().sum();
        if self.split.len() != 4 || self.split.iter().any(|f| *f <= 0.0) || (total - 1.0).abs() > 1e-9 {
            return bad(format!("split must be four positive fractions summing to 1, got {:?}", self.split));
        }
        if self.eval.days == 0 {
            return bad("eval.days must be positive".into());
        }
        let p = &self.personalization;
        if !(p.lr_scale > 0.0) || p.checkpoint_every == 0 || p.fqe_steps == 0 {
            return bad("personalization needs lr_scale > 0, checkpoint_every > 0 and fqe_steps > 0".into());
        }
        let a = &self.analysis;
        if !(a.bin_width > 0.0 && a.range[1] > a.range[0]) || a.horizon_minutes % 5 != 0 || a.horizon_minutes == 0 {
            return bad("analysis needs bin_width > 0, an increasing range and a positive horizon in 5-minute steps".into());
        }
        self.behavior.validate()?;
        self.safety.validate()?;
        self.dataset.features.validate()?;
        self.agent.validate()?;
        self.fqe.validate()?;
        Ok(())
    }

    /// Canonical JSON used for hashing and manifests.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Identifies what a run computes; the output location is not part of it.
    pub fn hash(&self) -> String {
        let what = Self {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        hex::encode(&Sha256::digest(what.canonical_json().as_bytes())[..8])
    }

    /// Independent seed for a named stream.
    pub fn derive_seed(&self, stream: &str) -> u64 {
        let h = Sha256::digest(stream.as_bytes());
        mix_seed(self.seed, u64::from_le_bytes(h[..8].try_into().expect("8 bytes")))
    }

    pub fn stream_seed(&self, stream: &str, patient: u32) -> u64 {
        mix_seed(self.derive_seed(stream), patient as u64)
    }

    /// Patient `id` of `cohort`, with its sensitivity shift applied.
    pub fn patient(&self, cohort: &CohortConfig, id: u32) -> PatientParams {
        let p = sample_patient(self.derive_seed("population"), id);
        let k = (id - cohort.first_index) as usize;
        match cohort.sensitivity_scales.get(k % cohort.sensitivity_scales.len().max(1)) {
            Some(f) => p.with_sensitivity_scale(*f),
            None => p,
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
