//! In-silico evaluation: learned policies wrapped with meal boluses and the
//! safety layer, rolled out on virtual patients.

use glyrl_agents::Policy;
use glyrl_core::features::StateBuilder;
use glyrl_core::{compute_metrics, ClinicalMetrics, EpisodeLog, FeatureConfig};
use glyrl_sim::{
    bolus_calculator, meal_schedule, run_episode, BehaviorConfig, BehaviorController, ControlAction, Controller,
    EpisodeOptions, Observation, PatientParams, PatientProxy,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{CohortConfig, RunConfig, ScenarioConfig};
use crate::{PipelineError, Result};

/// Drives a learned basal policy. Until the state window is full the patient's
/// baseline basal is used. With `meal_boluses` the calculator doses announced
/// meals exactly as the behavior policy would, without manual actions.
pub struct PolicyController<'a> {
    policy: &'a dyn Policy,
    builder: StateBuilder,
    proxy: PatientProxy,
    behavior: BehaviorConfig,
    meal_boluses: bool,
    fallback: f64,
    error: Option<String>,
}

impl<'a> PolicyController<'a> {
    pub fn new(
        policy: &'a dyn Policy,
        features: FeatureConfig,
        patient: &PatientParams,
        behavior: BehaviorConfig,
        meal_boluses: bool,
    ) -> Result<Self> {
        let proxy = PatientProxy::from_params(patient);
        Ok(Self {
            policy,
            builder: StateBuilder::new(features)?,
            proxy,
            behavior,
            meal_boluses,
            fallback: proxy.baseline_basal(behavior.basal_share),
            error: None,
        })
    }

    /// First failure of the wrapped policy, if any.
    pub fn error(&self) -> Option<&str> {
        self.error.as_deref()
    }
}

impl Controller for PolicyController<'_> {
    fn act(&mut self, obs: &Observation<'_>) -> ControlAction {
        let rate = match self.builder.state(obs.log, obs.step) {
            Some(s) => {
                let x = s.to_vec();
                match self.policy.act_batch(&x, x.len()) {
                    Ok(a) => a[0],
                    Err(e) => {
                        self.error.get_or_insert_with(|| format!("step {}: {e}", obs.step));
                        0.0
                    }
                }
            }
            None => self.fallback,
        };
        let mut out = ControlAction {
            rate,
            ..ControlAction::default()
        };
        if self.meal_boluses && obs.announced_carbs > 0.0 {
            match bolus_calculator(
                obs.announced_carbs,
                obs.cgm,
                self.proxy.carb_ratio,
                self.proxy.correction_factor,
                &self.behavior,
            ) {
                Ok(b) => {
                    out.bolus = b.units;
                    out.bolus_clamped = b.clamped;
                }
                Err(e) => {
                    self.error.get_or_insert_with(|| format!("step {}: {e}", obs.step));
                }
            }
        }
        out
    }
}

/// A controller under evaluation.
#[derive(Clone, Copy)]
pub enum Candidate<'a> {
    Behavior,
    Learned { policy: &'a dyn Policy, features: FeatureConfig },
}

impl Candidate<'_> {
    pub fn name(&self) -> String {
        match self {
            Candidate::Behavior => "behavior".into(),
            Candidate::Learned { policy, .. } => policy.id(),
        }
    }
}

/// Roll `candidate` out on patient `id` of `cohort` over the evaluation meal
/// plan. Meals, CGM noise and behavior randomness are shared across
/// candidates, so results are paired.
pub fn evaluate_patient(
    cfg: &RunConfig,
    cohort: &CohortConfig,
    id: u32,
    candidate: Candidate<'_>,
    scenario: &ScenarioConfig,
) -> Result<EpisodeLog> {
    let p = cfg.patient(cohort, id);
    let days = cfg.eval.days;
    let meals = meal_schedule(&cfg.meals, cfg.stream_seed("eval-meals", id), days);
    let opts = EpisodeOptions {
        announce_meals: scenario.announce_meals,
        safety_on: scenario.safety_on,
        noise_on: true,
        safety: cfg.safety.clone(),
        open_loop: Vec::new(),
        open_loop_basal: None,
        seed: cfg.stream_seed("eval-noise", id),
    };
    match candidate {
        Candidate::Behavior => {
            let mut c = BehaviorController::new(cfg.behavior, PatientProxy::from_params(&p), cfg.stream_seed("eval-behavior", id));
            Ok(run_episode(&p, &mut c, days, &meals, &opts)?)
        }
        Candidate::Learned { policy, features } => {
            let mut c = PolicyController::new(policy, features, &p, cfg.behavior, scenario.safety_on)?;
            let log = run_episode(&p, &mut c, days, &meals, &opts)?;
            match c.error() {
                Some(e) => Err(PipelineError::Policy(format!("{} on patient {id}: {e}", policy.id()))),
                None => Ok(log),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub patient: u32,
    pub policy: String,
    pub scenario: String,
    pub tir: f64,
    pub tbr: f64,
    pub tbr54: f64,
    pub tar: f64,
    pub cv: f64,
    pub mean_glycemia: f64,
    pub n_samples: usize,
}

impl MetricRow {
    pub fn new(patient: u32, policy: &str, scenario: &str, m: &ClinicalMetrics) -> Self {
        Self {
            patient,
            policy: policy.into(),
            scenario: scenario.into(),
            tir: m.tir,
            tbr: m.tbr,
            tbr54: m.tbr54,
            tar: m.tar,
            cv: m.cv,
            mean_glycemia: m.mean_glycemia,
            n_samples: m.n_samples,
        }
    }
}

pub struct CohortEvaluation {
    pub rows: Vec<MetricRow>,
    pub logs: Vec<EpisodeLog>,
}

/// Evaluate one candidate on every patient of `cohort` (in parallel).
pub fn evaluate_cohort(
    cfg: &RunConfig,
    cohort: &CohortConfig,
    candidate: Candidate<'_>,
    scenario: &ScenarioConfig,
) -> Result<CohortEvaluation> {
    let name = candidate.name();
    let tag = scenario.tag();
    let out: Vec<(MetricRow, EpisodeLog)> = cohort
        .patient_ids()
        .par_iter()
        .map(|id| {
            let log = evaluate_patient(cfg, cohort, *id, candidate, scenario)?;
            let m = compute_metrics(&log.cgm())?;
            Ok((MetricRow::new(*id, &name, &tag, &m), log))
        })
        .collect::<Result<_>>()?;
    let (rows, logs) = out.into_iter().unzip();
    Ok(CohortEvaluation { rows, logs })
}

/// Cohort means of the metric columns.
pub fn mean_row(rows: &[MetricRow]) -> Option<MetricRow> {
    let first = rows.first()?;
    let n = rows.len() as f64;
    let avg = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Some(MetricRow {
        patient: u32::MAX,
        policy: first.policy.clone(),
        scenario: first.scenario.clone(),
        tir: avg(|r| r.tir),
        tbr: avg(|r| r.tbr),
        tbr54: avg(|r| r.tbr54),
        tar: avg(|r| r.tar),
        cv: avg(|r| r.cv),
        mean_glycemia: avg(|r| r.mean_glycemia),
        n_samples: rows.iter().map(|r| r.n_samples).sum(),
    })
}
