//! Transition datasets built from episode logs.
//!
//! States are stored raw (f64, unnormalized) so that one dataset serves any
//! normalizer, and rewards are recomputed from the newest glycemia of the next
//! state so that one dataset serves any reward kind.

use std::collections::BTreeMap;
use std::path::Path;

use glyrl_nn::container::{Container, Record, TensorData};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::episode::EpisodeLog;
use crate::features::{FeatureConfig, Normalizer, StateBuilder};
use crate::reward::{reward, RewardKind};
use crate::{CoreError, Result};

pub const DATASET_FORMAT: u32 = 1;
pub const MAX_ACTION: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub features: FeatureConfig,
    /// Keep only days whose closed-loop fraction exceeds this; `None` disables the filter.
    pub coverage_threshold: Option<f64>,
    /// Keep steps whose insulin exceeds the action range, with the action
    /// clamped to the range, instead of excluding them. Training sets exclude;
    /// evaluation sets may clamp so that trajectories stay unbroken at meals.
    pub clamp_excess: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            coverage_threshold: Some(0.7),
            clamp_excess: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionCounts {
    /// Steps whose total insulin exceeded the action range (meal boluses).
    pub excess_action: usize,
    /// Of those, steps kept with a clamped action.
    #[serde(default)]
    pub clamped_action: usize,
    /// Days dropped by the coverage filter.
    pub low_coverage_days: usize,
    /// Steps lost to the filter.
    pub low_coverage_steps: usize,
    /// Transitions dropped because they straddle a split boundary.
    pub split_boundary: usize,
}

impl ExclusionCounts {
    fn add(&mut self, o: &ExclusionCounts) {
        self.excess_action += o.excess_action;
        self.clamped_action += o.clamped_action;
        self.low_coverage_days += o.low_coverage_days;
        self.low_coverage_steps += o.low_coverage_steps;
        self.split_boundary += o.split_boundary;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_transitions: usize,
    pub n_patients: usize,
    pub n_patient_days: usize,
    pub n_done: usize,
    pub mean_action: f64,
    pub exclusions: ExclusionCounts,
}

/// A chronological segment assignment for one patient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub patient: u32,
    /// Days of each segment, in order.
    pub segments: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub dim: usize,
    /// Row-major `n × dim` raw states.
    pub states: Vec<f64>,
    pub next_states: Vec<f64>,
    /// Total insulin of the step as a rate, U/h, in `[0, 10]`.
    pub actions: Vec<f64>,
    pub done: Vec<bool>,
    pub patient: Vec<u32>,
    pub day: Vec<u32>,
    pub step: Vec<u32>,
    pub exclusions: ExclusionCounts,
    pub provenance: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    config: DatasetConfig,
    dim: usize,
    n: usize,
    exclusions: ExclusionCounts,
    provenance: serde_json::Value,
}

/// Days of `log` that survive the coverage filter.
pub fn kept_days(log: &EpisodeLog, threshold: Option<f64>) -> Vec<u32> {
    log.closed_loop_coverage()
        .into_iter()
        .filter(|(_, c)| threshold.is_none_or(|t| *c > t))
        .map(|(d, _)| d)
        .collect()
}

impl Dataset {
    pub fn empty(config: DatasetConfig) -> Self {
        Self {
            config,
            dim: config.features.state_dim(),
            states: Vec::new(),
            next_states: Vec::new(),
            actions: Vec::new(),
            done: Vec::new(),
            patient: Vec::new(),
            day: Vec::new(),
            step: Vec::new(),
            exclusions: ExclusionCounts::default(),
            provenance: serde_json::Value::Null,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn next_state(&self, i: usize) -> &[f64] {
        &self.next_states[i * self.dim..(i + 1) * self.dim]
    }

    /// Glycemia the reward of transition `i` is computed from.
    pub fn next_cgm(&self, i: usize) -> f64 {
        self.next_state(i)[self.config.features.glycemia_newest()]
    }

    pub fn rewards(&self, kind: RewardKind) -> Vec<f64> {
        (0..self.len()).map(|i| reward(kind, self.next_cgm(i))).collect()
    }

    pub fn patients(&self) -> Vec<u32> {
        let mut p = self.patient.clone();
        p.sort_unstable();
        p.dedup();
        p
    }

    /// Distinct days of `patient`, in stored order.
    pub fn days_of(&self, patient: u32) -> Vec<u32> {
        let mut out: Vec<u32> = Vec::new();
        for (p, d) in self.patient.iter().zip(&self.day) {
            if *p == patient && out.last() != Some(d) && !out.contains(d) {
                out.push(*d);
            }
        }
        out
    }

    /// Append the transitions of one log.
    pub fn push_log(&mut self, log: &EpisodeLog) -> Result<()> {
        let fcfg = self.config.features;
        if log.len() < fcfg.window + 1 {
            return Err(CoreError::InsufficientData(format!(
                "log of patient {} has {} steps, need at least {}",
                log.meta.patient_id,
                log.len(),
                fcfg.window + 1
            )));
        }
        let builder = StateBuilder::new(fcfg)?;
        let kept = kept_days(log, self.config.coverage_threshold);
        let all_days = log.closed_loop_coverage();
        self.exclusions.low_coverage_days += all_days.len() - kept.len();
        let is_kept = |d: u32| kept.binary_search(&d).is_ok();
        let recs = &log.records;
        self.exclusions.low_coverage_steps += recs.iter().filter(|r| !is_kept(r.day)).count();

        // a run ends where the next step leaves the kept set or the day sequence jumps
        let run_continues = |i: usize| -> bool {
            i + 1 < recs.len() && is_kept(recs[i + 1].day) && recs[i + 1].day.saturating_sub(recs[i].day) <= 1
        };
        let mut prev_state = None;
        for i in fcfg.first_step()..recs.len() - 1 {
            let s = match prev_state.take() {
                Some(s) => s,
                None => builder.state(log, i).expect("index within log"),
            };
            let s_next = builder.state(log, i + 1).expect("index within log");
            prev_state = Some(s_next.clone());
            if !is_kept(recs[i].day) || !run_continues(i) {
                continue;
            }
            let mut a = recs[i].total_rate();
            if a > MAX_ACTION {
                self.exclusions.excess_action += 1;
                if !self.config.clamp_excess {
                    continue;
                }
                self.exclusions.clamped_action += 1;
                a = MAX_ACTION;
            }
            let done = !run_continues(i + 1);
            self.states.extend(s.to_vec());
            self.next_states.extend(s_next.to_vec());
            self.actions.push(a.max(0.0));
            self.done.push(done);
            self.patient.push(log.meta.patient_id);
            self.day.push(recs[i].day);
            self.step.push(i as u32);
        }
        Ok(())
    }

    pub fn from_logs(logs: &[EpisodeLog], config: DatasetConfig, provenance: serde_json::Value) -> Result<Self> {
        config.features.validate()?;
        let mut ds = Self::empty(config);
        ds.provenance = provenance;
        for log in logs {
            ds.push_log(log)?;
        }
        Ok(ds)
    }

    pub fn fit_normalizer(&self) -> Result<Normalizer> {
        if self.is_empty() {
            return Err(CoreError::EmptyInput("dataset"));
        }
        Normalizer::fit_states(&self.states, &self.config.features, self.content_hash())
    }

    /// Transitions at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut out = Self::empty(self.config);
        out.provenance = self.provenance.clone();
        out.exclusions = self.exclusions;
        for &i in indices {
            out.states.extend_from_slice(self.state(i));
            out.next_states.extend_from_slice(self.next_state(i));
            out.actions.push(self.actions[i]);
            out.done.push(self.done[i]);
            out.patient.push(self.patient[i]);
            out.day.push(self.day[i]);
            out.step.push(self.step[i]);
        }
        out
    }

    pub fn for_patient(&self, patient: u32) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|i| self.patient[*i] == patient).collect();
        self.select(&idx)
    }

    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or(CoreError::EmptyInput("dataset list"))?;
        let mut out = Self::empty(first.config);
        out.provenance = first.provenance.clone();
        for p in parts {
            if p.dim != out.dim {
                return Err(CoreError::InvalidValue("datasets have different state dimensions".into()));
            }
            out.states.extend_from_slice(&p.states);
            out.next_states.extend_from_slice(&p.next_states);
            out.actions.extend_from_slice(&p.actions);
            out.done.extend_from_slice(&p.done);
            out.patient.extend_from_slice(&p.patient);
            out.day.extend_from_slice(&p.day);
            out.step.extend_from_slice(&p.step);
            out.exclusions.add(&p.exclusions);
        }
        Ok(out)
    }

    /// Day-level segment assignment for one patient.
    ///
    /// Each segment gets `floor(n·f)` days; leftover days go one each to the
    /// earliest segments.
    pub fn split_days(days: &[u32], fractions: &[f64]) -> Result<Vec<Vec<u32>>> {
        let total: f64 = fractions.iter().sum();
        if fractions.is_empty() || (total - 1.0).abs() > 1e-9 || fractions.iter().any(|f| *f < 0.0) {
            return Err(CoreError::InvalidValue(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
        }
        let n = days.len();
        if n < 4.max(fractions.len()) {
            return Err(CoreError::InsufficientData(format!("{n} days cannot be split into {} segments", fractions.len())));
        }
        let mut sizes: Vec<usize> = fractions.iter().map(|f| (n as f64 * f + 1e-9).floor() as usize).collect();
        let mut rest = n - sizes.iter().sum::<usize>();
        for s in sizes.iter_mut() {
            if rest == 0 {
                break;
            }
            *s += 1;
            rest -= 1;
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut at = 0;
        for s in sizes {
            out.push(days[at..at + s].to_vec());
            at += s;
        }
        Ok(out)
    }

    /// Split every patient chronologically by whole days. Returns one dataset per
    /// segment plus the day assignment. Transitions whose next step falls in a
    /// later segment are dropped so no segment sees another's states.
    pub fn chronological_split(&self, fractions: &[f64]) -> Result<(Vec<Dataset>, Vec<Split>)> {
        let mut seg_of: BTreeMap<(u32, u32), usize> = BTreeMap::new();
        let mut splits = Vec::new();
        for p in self.patients() {
            let segs = Self::split_days(&self.days_of(p), fractions)?;
            for (k, days) in segs.iter().enumerate() {
                for d in days {
                    seg_of.insert((p, *d), k);
                }
            }
            splits.push(Split { patient: p, segments: segs });
        }
        let mut idx = vec![Vec::new(); fractions.len()];
        let mut dropped = 0;
        for i in 0..self.len() {
            let k = seg_of[&(self.patient[i], self.day[i])];
            let next_day = i + 1 < self.len() && self.patient[i + 1] == self.patient[i] && !self.done[i];
            if next_day {
                if let Some(k2) = seg_of.get(&(self.patient[i], self.day[i + 1])) {
                    if *k2 != k {
                        dropped += 1;
                        continue;
                    }
                }
            }
            idx[k].push(i);
        }
        let parts = idx
            .iter()
            .map(|ix| {
                let mut d = self.select(ix);
                d.exclusions.split_boundary += dropped;
                d
            })
            .collect();
        Ok((parts, splits))
    }

    pub fn summary(&self) -> DatasetSummary {
        let mut pd: Vec<(u32, u32)> = self.patient.iter().copied().zip(self.day.iter().copied()).collect();
        pd.sort_unstable();
        pd.dedup();
        DatasetSummary {
            n_transitions: self.len(),
            n_patients: self.patients().len(),
            n_patient_days: pd.len(),
            n_done: self.done.iter().filter(|d| **d).count(),
            mean_action: if self.is_empty() {
                0.0
            } else {
                self.actions.iter().sum::<f64>() / self.len() as f64
            },
            exclusions: self.exclusions,
        }
    }

    /// Feature-major copy of a row-major block.
    fn columns(rows: &[f64], dim: usize) -> Vec<f64> {
        let n = if dim == 0 { 0 } else { rows.len() / dim };
        let mut out = vec![0.0; rows.len()];
        for i in 0..n {
            for f in 0..dim {
                out[f * n + i] = rows[i * dim + f];
            }
        }
        out
    }

    fn rows(cols: &[f64], dim: usize) -> Vec<f64> {
        let n = if dim == 0 { 0 } else { cols.len() / dim };
        let mut out = vec![0.0; cols.len()];
        for f in 0..dim {
            for i in 0..n {
                out[i * dim + f] = cols[f * n + i];
            }
        }
        out
    }

    pub fn to_container(&self) -> Result<Container> {
        let n = self.len();
        let m = Manifest {
            format: DATASET_FORMAT,
            config: self.config,
            dim: self.dim,
            n,
            exclusions: self.exclusions,
            provenance: self.provenance.clone(),
        };
        let mut c = Container::new(serde_json::to_string(&m)?);
        c.push(Record::new("states", vec![self.dim, n], TensorData::F64(Self::columns(&self.states, self.dim))));
        c.push(Record::new(
            "next_states",
            vec![self.dim, n],
            TensorData::F64(Self::columns(&self.next_states, self.dim)),
        ));
        c.push(Record::new("actions", vec![n], TensorData::F64(self.actions.clone())));
        c.push(Record::new("done", vec![n], TensorData::U8(self.done.iter().map(|d| u8::from(*d)).collect())));
        c.push(Record::new("patient", vec![n], TensorData::U32(self.patient.clone())));
        c.push(Record::new("day", vec![n], TensorData::U32(self.day.clone())));
        c.push(Record::new("step", vec![n], TensorData::U32(self.step.clone())));
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&c.manifest)?;
        if m.format != DATASET_FORMAT {
            return Err(CoreError::Format(format!("dataset format {} (expected {DATASET_FORMAT})", m.format)));
        }
        let states = c.get("states")?.as_f64()?;
        let next_states = c.get("next_states")?.as_f64()?;
        let actions = c.get("actions")?.as_f64()?.to_vec();
        let done: Vec<bool> = c.get("done")?.as_u8()?.iter().map(|b| *b != 0).collect();
        let patient = c.get("patient")?.as_u32()?.to_vec();
        let day = c.get("day")?.as_u32()?.to_vec();
        let step = c.get("step")?.as_u32()?.to_vec();
        let n = m.n;
        if states.len() != n * m.dim
            || next_states.len() != n * m.dim
            || [actions.len(), done.len(), patient.len(), day.len(), step.len()].iter().any(|l| *l != n)
        {
            return Err(CoreError::Format("dataset columns disagree with manifest length".into()));
        }
        Ok(Self {
            config: m.config,
            dim: m.dim,
            states: Self::rows(states, m.dim),
            next_states: Self::rows(next_states, m.dim),
            actions,
            done,
            patient,
            day,
            step,
            exclusions: m.exclusions,
            provenance: m.provenance,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_container()?.to_bytes()?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_container()?.write_atomic(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    /// Short content identifier over all columns.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        for x in self.states.iter().chain(&self.next_states).chain(&self.actions) {
            h.update(x.to_le_bytes());
        }
        for ((d, p), (day, s)) in self.done.iter().zip(&self.patient).zip(self.day.iter().zip(&self.step)) {
            h.update([u8::from(*d)]);
            h.update(p.to_le_bytes());
            h.update(day.to_le_bytes());
            h.update(s.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}
