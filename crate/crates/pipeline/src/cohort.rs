//! Behavior-policy data generation for a cohort.

use glyrl_core::{compute_metrics, Dataset, EpisodeLog};
use glyrl_sim::glucosim::open_loop_schedule;
use glyrl_sim::{meal_schedule, run_episode, BehaviorController, EpisodeOptions, PatientProxy};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{CohortConfig, RunConfig};
use crate::Result;

/// Simulate `days` of behavior-policy control for one patient, with manual
/// actions and occasional open-loop gaps.
pub fn behavior_log(cfg: &RunConfig, cohort: &CohortConfig, id: u32) -> Result<EpisodeLog> {
    let p = cfg.patient(cohort, id);
    let meals = meal_schedule(&cfg.meals, cfg.stream_seed("meals", id), cohort.days);
    let [lo, hi] = cohort.open_loop_hours;
    let opts = EpisodeOptions {
        announce_meals: true,
        safety_on: true,
        noise_on: true,
        safety: cfg.safety.clone(),
        open_loop: open_loop_schedule(cfg.stream_seed("gaps", id), cohort.days, cohort.open_loop_probability, lo, hi),
        open_loop_basal: None,
        seed: cfg.stream_seed("noise", id),
    };
    let mut ctl = BehaviorController::new(cfg.behavior, PatientProxy::from_params(&p), cfg.stream_seed("behavior", id));
    Ok(run_episode(&p, &mut ctl, cohort.days, &meals, &opts)?)
}

/// One log per patient, in patient order; simulated in parallel.
pub fn behavior_logs(cfg: &RunConfig, cohort: &CohortConfig) -> Result<Vec<EpisodeLog>> {
    cohort.patient_ids().par_iter().map(|id| behavior_log(cfg, cohort, *id)).collect()
}

pub fn build_dataset(cfg: &RunConfig, cohort: &CohortConfig, logs: &[EpisodeLog]) -> Result<Dataset> {
    let provenance = serde_json::json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "cohort": cohort,
    });
    Ok(Dataset::from_logs(logs, cfg.dataset, provenance)?)
}

/// The evaluation variant of the behavior dataset: steps whose insulin
/// exceeded the action range (meal boluses) are kept with the maximal rate,
/// so FQE sees unbroken trajectories.
pub fn build_eval_dataset(cfg: &RunConfig, cohort: &CohortConfig, logs: &[EpisodeLog]) -> Result<Dataset> {
    let mut c = cfg.clone();
    c.dataset.clamp_excess = true;
    build_dataset(&c, cohort, logs)
}

/// Mean and standard deviation over patients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
}

impl Stat {
    pub fn of(x: &[f64]) -> Self {
        let n = x.len().max(1) as f64;
        let mean = x.iter().sum::<f64>() / n;
        let sd = if x.len() > 1 {
            (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.1} ± {:.1}", self.mean, self.sd)
    }
}

/// Cohort characteristics in the layout of the dataset table: per-patient
/// values summarized as mean ± sd.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub n_patients: usize,
    pub days_per_patient: u32,
    pub weight: Stat,
    pub tdd: Stat,
    pub tir: Stat,
    pub tbr: Stat,
    pub tar: Stat,
    pub mean_glycemia: Stat,
    /// Percent of meal boluses manually modified or added.
    pub manual_boluses: Stat,
    /// Percent of steps under closed loop.
    pub closed_loop: Stat,
    pub kept_days: usize,
    pub n_transitions: usize,
    /// Sanity gate: behavior TIR within the 60–75 % band of real-world data.
    pub tir_in_band: bool,
}

pub const TIR_BAND: (f64, f64) = (60.0, 75.0);

pub fn summarize(logs: &[EpisodeLog], ds: &Dataset) -> Result<CohortSummary> {
    let mut cols: [Vec<f64>; 8] = Default::default();
    for log in logs {
        let m = compute_metrics(&log.cgm())?;
        let days = log.days().len().max(1) as f64;
        let units: f64 = log.records.iter().map(|r| r.units()).sum();
        let boluses = log.records.iter().filter(|r| r.bolus > 0.0).count();
        let manual = log.flags.iter().filter(|f| f.manual_modified || f.manual_bolus).count();
        let closed = log.flags.iter().filter(|f| f.closed_loop).count();
        for (c, v) in cols.iter_mut().zip([
            log.meta.weight,
            units / days,
            m.tir,
            m.tbr,
            m.tar,
            m.mean_glycemia,
            100.0 * manual as f64 / boluses.max(1) as f64,
            100.0 * closed as f64 / log.len().max(1) as f64,
        ]) {
            c.push(v);
        }
    }
    let s = ds.summary();
    let tir = Stat::of(&cols[2]);
    Ok(CohortSummary {
        n_patients: logs.len(),
        days_per_patient: logs.first().map_or(0, |l| l.days().len() as u32),
        weight: Stat::of(&cols[0]),
        tdd: Stat::of(&cols[1]),
        tir,
        tbr: Stat::of(&cols[3]),
        tar: Stat::of(&cols[4]),
        mean_glycemia: Stat::of(&cols[5]),
        manual_boluses: Stat::of(&cols[6]),
        closed_loop: Stat::of(&cols[7]),
        kept_days: s.n_patient_days,
        n_transitions: s.n_transitions,
        tir_in_band: (TIR_BAND.0..=TIR_BAND.1).contains(&tir.mean),
    })
}

impl std::fmt::Display for CohortSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "patients                  {}", self.n_patients)?;
        writeln!(f, "days per patient          {}", self.days_per_patient)?;
        writeln!(f, "days kept (>70% closed)   {}", self.kept_days)?;
        writeln!(f, "transitions               {}", self.n_transitions)?;
        writeln!(f, "weight (kg)               {}", self.weight)?;
        writeln!(f, "TDD (U/day)               {}", self.tdd)?;
        writeln!(f, "TIR (%)                   {}", self.tir)?;
        writeln!(f, "TBR (%)                   {}", self.tbr)?;
        writeln!(f, "TAR (%)                   {}", self.tar)?;
        writeln!(f, "mean glycemia (mg/dL)     {}", self.mean_glycemia)?;
        writeln!(f, "manual boluses (%)        {}", self.manual_boluses)?;
        writeln!(f, "closed loop (%)           {}", self.closed_loop)?;
        write!(
            f,
            "TIR sanity band [{}, {}]  {}",
            TIR_BAND.0,
            TIR_BAND.1,
            if self.tir_in_band { "ok" } else { "OUT OF BAND" }
        )
    }
}
