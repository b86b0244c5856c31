//! Patient-wise personalization: fine-tune the population model on a
//! patient's first chronological segment, select a checkpoint with FQE fitted
//! on the second and read out on the third, and report FQE estimates on the
//! fourth.
//!
//! Segments are only reachable through [`PatientSegments`], which logs every
//! read in an [`AuditLog`]; the test segment stays sealed until
//! [`AuditLog::begin_reporting`].

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use glyrl_agents::train::run;
use glyrl_agents::{estimate_metric, fqe_train, FqeConfig, FqeModel, Learner, Policy, PolicyArtifact, Transitions};
use glyrl_core::{Dataset, RewardKind};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, METRIC_KINDS};
use crate::evaluation::BolusOverride;
use crate::{PipelineError, Result};

pub const SEGMENTS: usize = 4;
pub const TEST_SEGMENT: usize = SEGMENTS - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Selection,
    Reporting,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Access {
    pub phase: Phase,
    pub patient: u32,
    pub segment: usize,
    pub purpose: String,
}

#[derive(Debug, Default)]
pub struct AuditLog {
    reporting: AtomicBool,
    events: Mutex<Vec<Access>>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn begin_reporting(&self) {
        self.reporting.store(true, Ordering::SeqCst);
    }

    pub fn phase(&self) -> Phase {
        if self.reporting.load(Ordering::SeqCst) {
            Phase::Reporting
        } else {
            Phase::Selection
        }
    }

    fn record(&self, patient: u32, segment: usize, purpose: &str) -> Result<()> {
        let phase = self.phase();
        if segment == TEST_SEGMENT && phase != Phase::Reporting {
            return Err(PipelineError::Hygiene(format!(
                "patient {patient}: test segment read for '{purpose}' before final reporting"
            )));
        }
        self.events.lock().expect("audit lock").push(Access {
            phase,
            patient,
            segment,
            purpose: purpose.into(),
        });
        Ok(())
    }

    /// Every read so far, in a deterministic order (phase first).
    pub fn events(&self) -> Vec<Access> {
        let mut e = self.events.lock().expect("audit lock").clone();
        e.sort();
        e
    }
}

/// One patient's chronological segments: `train` excludes steps outside the
/// action range (agent training data), `eval` keeps them clamped (FQE data).
pub struct PatientSegments {
    pub patient: u32,
    train: Vec<Dataset>,
    eval: Vec<Dataset>,
}

impl PatientSegments {
    pub fn new(patient: u32, train: &Dataset, eval: &Dataset, fractions: &[f64]) -> Result<Self> {
        if fractions.len() != SEGMENTS {
            return Err(PipelineError::Config(format!("personalization needs {SEGMENTS} split fractions")));
        }
        let (train, _) = train.for_patient(patient).chronological_split(fractions)?;
        let (eval, _) = eval.for_patient(patient).chronological_split(fractions)?;
        Ok(Self { patient, train, eval })
    }

    /// All patients of a cohort's datasets.
    pub fn split_cohort(train: &Dataset, eval: &Dataset, fractions: &[f64]) -> Result<Vec<Self>> {
        eval.patients().into_iter().map(|p| Self::new(p, train, eval, fractions)).collect()
    }

    /// Days per segment (metadata only; not audited).
    pub fn segment_days(&self) -> Vec<usize> {
        self.eval.iter().map(|d| d.days_of(self.patient).len()).collect()
    }

    pub fn segment_transitions(&self) -> Vec<usize> {
        self.eval.iter().map(Dataset::len).collect()
    }

    pub fn train_segment(&self, k: usize, purpose: &str, audit: &AuditLog) -> Result<&Dataset> {
        audit.record(self.patient, k, purpose)?;
        Ok(&self.train[k])
    }

    pub fn eval_segment(&self, k: usize, purpose: &str, audit: &AuditLog) -> Result<&Dataset> {
        audit.record(self.patient, k, purpose)?;
        Ok(&self.eval[k])
    }
}

/// FQE estimates of the training reward and the three time-in-band metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KindEstimates {
    pub reward: f64,
    pub tir: f64,
    pub tbr: f64,
    pub tar: f64,
}

impl KindEstimates {
    fn from_values(v: &[f64]) -> Self {
        Self {
            reward: v[0],
            tir: v[1],
            tbr: v[2],
            tar: v[3],
        }
    }

    pub fn minus(&self, o: &Self) -> Self {
        Self {
            reward: self.reward - o.reward,
            tir: self.tir - o.tir,
            tbr: self.tbr - o.tbr,
            tar: self.tar - o.tar,
        }
    }

    pub fn max_abs(&self) -> f64 {
        [self.reward, self.tir, self.tbr, self.tar].iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointScore {
    /// Fine-tuning steps taken.
    pub step: u64,
    /// FQE-estimated training reward on the selection segment.
    pub estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientReport {
    pub patient: u32,
    pub skipped: Option<String>,
    pub segment_days: Vec<usize>,
    pub segment_transitions: Vec<usize>,
    pub scores: Vec<CheckpointScore>,
    pub selected_step: Option<u64>,
    pub selected_hash: Option<String>,
    pub personalized: KindEstimates,
    /// Population model under this patient's own FQE models.
    pub population_matched: KindEstimates,
    /// Population model under FQE fitted on the union of all selection-FQE segments.
    pub population_union: KindEstimates,
}

impl PatientReport {
    pub fn delta_matched(&self) -> KindEstimates {
        self.personalized.minus(&self.population_matched)
    }

    pub fn delta_union(&self) -> KindEstimates {
        self.personalized.minus(&self.population_union)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationReport {
    pub reward: RewardKind,
    pub population_hash: String,
    pub patients: Vec<PatientReport>,
    pub audit: Vec<Access>,
}

impl PersonalizationReport {
    pub fn evaluated(&self) -> impl Iterator<Item = &PatientReport> {
        self.patients.iter().filter(|p| p.skipped.is_none())
    }

    /// Patients whose personalized reward estimate beats the population
    /// model's: (matched FQE, union FQE).
    pub fn improved(&self) -> (usize, usize) {
        let m = self.evaluated().filter(|p| p.delta_matched().reward > 0.0).count();
        let u = self.evaluated().filter(|p| p.delta_union().reward > 0.0).count();
        (m, u)
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "patient", "skipped", "selected_step", "which", "reward", "tir", "tbr", "tar",
        ])?;
        for p in &self.patients {
            let step = p.selected_step.map(|s| s.to_string()).unwrap_or_default();
            let skipped = p.skipped.clone().unwrap_or_default();
            for (which, e) in [
                ("personalized", p.personalized),
                ("population_matched", p.population_matched),
                ("population_union", p.population_union),
            ] {
                w.write_record([
                    p.patient.to_string(),
                    skipped.clone(),
                    step.clone(),
                    which.into(),
                    e.reward.to_string(),
                    e.tir.to_string(),
                    e.tbr.to_string(),
                    e.tar.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| PipelineError::io(path, e))
    }
}

pub struct PersonalizationOutcome {
    pub report: PersonalizationReport,
    /// Selected personalized model per evaluated patient.
    pub models: Vec<(u32, PolicyArtifact)>,
}

struct Selection {
    scores: Vec<CheckpointScore>,
    selected: usize,
    model: PolicyArtifact,
    /// Reward then metric kinds, for the population and the selected model.
    population_fqe: Vec<FqeModel>,
    personalized_fqe: Vec<FqeModel>,
}

fn kinds(reward: RewardKind) -> Vec<RewardKind> {
    std::iter::once(reward).chain(METRIC_KINDS).collect()
}

fn read_out(models: &[FqeModel], policy: &dyn Policy, seg: &Dataset) -> Result<KindEstimates> {
    let p = BolusOverride::new(policy, seg);
    let v = models
        .iter()
        .map(|m| Ok(estimate_metric(m, &seg.states, &p)?.point))
        .collect::<Result<Vec<f64>>>()?;
    Ok(KindEstimates::from_values(&v))
}

/// Fine-tune checkpoints: the population model itself, then every
/// `checkpoint_every` steps and the final step.
fn fine_tune(cfg: &RunConfig, population: &PolicyArtifact, seg: &Dataset, patient: u32) -> Result<Vec<PolicyArtifact>> {
    let p = &cfg.personalization;
    if p.fine_tune_steps == 0 {
        return Ok(vec![population.clone()]);
    }
    let mut c = population.config.clone();
    c.actor_lr *= p.lr_scale;
    c.critic_lr *= p.lr_scale;
    c.steps = p.fine_tune_steps;
    c.checkpoint_every = p.checkpoint_every;
    c.seed = cfg.stream_seed("fine-tune", patient);
    let data = Transitions::from_dataset(seg, c.reward)?;
    let mut learner = Learner::from_artifact(population.clone(), &data, Some(c))?;
    let mut out = Vec::new();
    run(&mut learner, p.fine_tune_steps, &mut |a| {
        out.push(a.clone());
        Ok(())
    })?;
    out[0] = population.clone();
    Ok(out)
}

/// Argmax of the estimates; ties keep the earliest checkpoint.
fn best_checkpoint(scores: &[CheckpointScore]) -> usize {
    scores
        .iter()
        .enumerate()
        .fold(0, |best, (k, s)| if s.estimate > scores[best].estimate { k } else { best })
}

fn select(cfg: &RunConfig, population: &PolicyArtifact, seg: &PatientSegments, audit: &AuditLog) -> Result<Selection> {
    let pc = &cfg.personalization;
    let id = seg.patient;
    let reward = population.config.reward;
    let checkpoints = fine_tune(cfg, population, seg.train_segment(0, "fine-tune", audit)?, id)?;

    let fit = seg.eval_segment(1, "checkpoint FQE", audit)?;
    let score_on = seg.eval_segment(2, "checkpoint selection", audit)?;
    let cold = FqeConfig {
        steps: pc.fqe_steps,
        seed: cfg.stream_seed("fqe", id),
        ..cfg.fqe.clone()
    };
    let warm = FqeConfig {
        steps: pc.warm_fqe_steps,
        ..cold.clone()
    };
    let fit_reward = Transitions::from_dataset(fit, reward)?;
    let mut chain: Vec<FqeModel> = Vec::with_capacity(checkpoints.len());
    let mut scores = Vec::with_capacity(checkpoints.len());
    for art in &checkpoints {
        let policy = BolusOverride::new(art, fit);
        let model = match chain.last() {
            None => fqe_train(&fit_reward, &policy, Some(reward), &cold, None)?,
            Some(prev) => fqe_train(&fit_reward, &policy, Some(reward), &warm, Some(prev))?,
        };
        let scored = BolusOverride::new(art, score_on);
        scores.push(CheckpointScore {
            step: art.steps - population.steps,
            estimate: estimate_metric(&model, &score_on.states, &scored)?.point,
        });
        chain.push(model);
    }
    let selected = best_checkpoint(&scores);
    let model = checkpoints[selected].clone();

    let metric_fqe = |art: &PolicyArtifact| -> Result<Vec<FqeModel>> {
        let policy = BolusOverride::new(art, fit);
        METRIC_KINDS
            .par_iter()
            .map(|k| Ok(fqe_train(&Transitions::from_dataset(fit, *k)?, &policy, Some(*k), &cold, None)?))
            .collect()
    };
    let mut population_fqe = vec![chain[0].clone()];
    population_fqe.extend(metric_fqe(population)?);
    let personalized_fqe = if selected == 0 {
        population_fqe.clone()
    } else {
        let mut v = vec![chain[selected].clone()];
        v.extend(metric_fqe(&model)?);
        v
    };
    Ok(Selection {
        scores,
        selected,
        model,
        population_fqe,
        personalized_fqe,
    })
}

/// Run the protocol for every patient. Patients with a segment shorter than
/// `min_segment_days` are reported as skipped.
pub fn personalize(
    cfg: &RunConfig,
    population: &PolicyArtifact,
    patients: &[PatientSegments],
    audit: &AuditLog,
) -> Result<PersonalizationOutcome> {
    let pc = &cfg.personalization;
    let reward = population.config.reward;
    let selections: Vec<std::result::Result<Selection, String>> = patients
        .par_iter()
        .map(|seg| {
            let days = seg.segment_days();
            if let Some(k) = days.iter().position(|d| *d < pc.min_segment_days) {
                return Ok(Err(format!(
                    "segment {} has {} days, fewer than {}",
                    k + 1,
                    days[k],
                    pc.min_segment_days
                )));
            }
            select(cfg, population, seg, audit).map(Ok)
        })
        .collect::<Result<_>>()?;

    // population FQE on the union of the selection-FQE segments
    let mut union_parts = Vec::new();
    for (seg, sel) in patients.iter().zip(&selections) {
        if sel.is_ok() {
            union_parts.push(seg.eval_segment(1, "population FQE", audit)?.clone());
        }
    }
    let union_fqe: Vec<FqeModel> = if union_parts.is_empty() {
        Vec::new()
    } else {
        let union = Dataset::concat(&union_parts)?;
        let policy = BolusOverride::new(population, &union);
        let c = FqeConfig {
            seed: cfg.derive_seed("population-fqe"),
            ..cfg.fqe.clone()
        };
        kinds(reward)
            .par_iter()
            .map(|k| Ok(fqe_train(&Transitions::from_dataset(&union, *k)?, &policy, Some(*k), &c, None)?))
            .collect::<Result<_>>()?
    };

    audit.begin_reporting();
    let mut reports = Vec::with_capacity(patients.len());
    let mut models = Vec::new();
    for (seg, sel) in patients.iter().zip(selections) {
        let mut r = PatientReport {
            patient: seg.patient,
            skipped: None,
            segment_days: seg.segment_days(),
            segment_transitions: seg.segment_transitions(),
            scores: Vec::new(),
            selected_step: None,
            selected_hash: None,
            personalized: KindEstimates::default(),
            population_matched: KindEstimates::default(),
            population_union: KindEstimates::default(),
        };
        match sel {
            Err(reason) => r.skipped = Some(reason),
            Ok(s) => {
                let test = seg.eval_segment(TEST_SEGMENT, "final report", audit)?;
                r.personalized = read_out(&s.personalized_fqe, &s.model, test)?;
                r.population_matched = read_out(&s.population_fqe, population, test)?;
                r.population_union = read_out(&union_fqe, population, test)?;
                r.selected_step = Some(s.scores[s.selected].step);
                r.selected_hash = Some(s.model.hash()?);
                r.scores = s.scores;
                models.push((seg.patient, s.model));
            }
        }
        reports.push(r);
    }
    Ok(PersonalizationOutcome {
        report: PersonalizationReport {
            reward,
            population_hash: population.hash()?,
            patients: reports,
            audit: audit.events(),
        },
        models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{behavior_logs, build_dataset, build_eval_dataset};
    use glyrl_agents::{train, AgentConfig};
    use glyrl_core::Normalizer;

    fn score(step: u64, estimate: f64) -> CheckpointScore {
        CheckpointScore { step, estimate }
    }

    #[test]
    fn ties_keep_the_earliest_checkpoint() {
        assert_eq!(best_checkpoint(&[score(0, 1.0), score(5, 1.0), score(10, 0.5)]), 0);
        assert_eq!(best_checkpoint(&[score(0, 1.0), score(5, 2.0), score(10, 2.0)]), 1);
        assert_eq!(best_checkpoint(&[score(0, f64::NAN), score(5, 2.0)]), 0);
    }

    #[test]
    fn test_segment_sealed_until_reporting() {
        let audit = AuditLog::new();
        audit.record(7, 0, "fine-tune").unwrap();
        assert!(matches!(audit.record(7, TEST_SEGMENT, "peek"), Err(PipelineError::Hygiene(_))));
        audit.begin_reporting();
        audit.record(7, TEST_SEGMENT, "final report").unwrap();
        let e = audit.events();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].phase, e[1].phase), (Phase::Selection, Phase::Reporting));
    }

    fn tiny() -> (RunConfig, PolicyArtifact, Vec<PatientSegments>) {
        let mut cfg = RunConfig::default();
        cfg.personalization.cohort.n_patients = 2;
        cfg.personalization.cohort.days = 8;
        cfg.personalization.fine_tune_steps = 60;
        cfg.personalization.checkpoint_every = 30;
        cfg.personalization.warm_fqe_steps = 20;
        cfg.personalization.fqe_steps = 40;
        cfg.personalization.min_segment_days = 1;
        cfg.fqe.hidden = vec![8];
        cfg.fqe.steps = 40;
        cfg.fqe.batch_size = 32;
        cfg.agent = AgentConfig {
            hidden: vec![8],
            batch_size: 32,
            steps: 50,
            ..cfg.agent
        };
        let pc = cfg.personalization.cohort.clone();
        let logs = behavior_logs(&cfg, &pc).unwrap();
        let tr = build_dataset(&cfg, &pc, &logs).unwrap();
        let ev = build_eval_dataset(&cfg, &pc, &logs).unwrap();
        let t = Transitions::from_dataset(&tr, cfg.agent.reward).unwrap();
        let norm = Normalizer::fit_states(&tr.states, &tr.config.features, tr.content_hash()).unwrap();
        let pop = train(&t, cfg.agent.clone(), norm, Some(tr.config.features), &mut |_| Ok(())).unwrap().artifact;
        let segs = PatientSegments::split_cohort(&tr, &ev, &cfg.split).unwrap();
        (cfg, pop, segs)
    }

    #[test]
    fn protocol_end_to_end_and_null_control() {
        let (cfg, pop, segs) = tiny();
        let audit = AuditLog::new();
        let out = personalize(&cfg, &pop, &segs, &audit).unwrap();
        let r = &out.report;
        assert_eq!(r.evaluated().count(), 2);
        for p in r.evaluated() {
            assert_eq!(p.scores.len(), 3);
            assert_eq!(p.scores.iter().map(|s| s.step).collect::<Vec<_>>(), vec![0, 30, 60]);
            assert!(p.personalized.reward.is_finite() && p.population_union.tir.is_finite());
        }
        assert_eq!(out.models.len(), 2);
        assert!(r.audit.iter().filter(|a| a.segment == TEST_SEGMENT).all(|a| a.phase == Phase::Reporting));
        assert!(r.audit.iter().any(|a| a.segment == TEST_SEGMENT));

        let mut null = cfg.clone();
        null.personalization.fine_tune_steps = 0;
        let n = personalize(&null, &pop, &segs, &AuditLog::new()).unwrap();
        for p in n.report.evaluated() {
            assert_eq!(p.selected_step, Some(0));
            assert_eq!(p.delta_matched().max_abs(), 0.0);
        }
        assert_eq!(n.report.improved().0, 0);
    }

    #[test]
    fn short_segments_are_skipped() {
        let (mut cfg, pop, segs) = tiny();
        cfg.personalization.min_segment_days = 100;
        let out = personalize(&cfg, &pop, &segs, &AuditLog::new()).unwrap();
        assert!(out.report.patients.iter().all(|p| p.skipped.is_some()));
        assert!(out.models.is_empty());
        assert_eq!(out.report.improved(), (0, 0));
    }
}
