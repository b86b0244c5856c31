//! State construction from episode logs and the feature normalizer.
//!
//! Layout of the flat state (window `w`, default 12):
//! `glycemia[w] | insulin[w] | iob | cob | tdd | tod_sin | tod_cos | weight`,
//! histories oldest → newest.
//!
//! At decision step `i` the glycemia window ends at the reading of step `i`; the
//! insulin window covers the `w` steps *before* `i`, because the action of step `i`
//! is what the policy is about to choose. Each insulin slot is the total insulin of
//! that step as a rate (basal + bolus·12, U/h). The first decision step `w − 1`
//! lacks one insulin slot, which is padded with the step-0 value.

use serde::{Deserialize, Serialize};

use crate::episode::{EpisodeLog, STEPS_PER_DAY, STEP_MINUTES};
use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// History length in 5-minute steps.
    pub window: usize,
    /// Insulin duration of action, min.
    pub dia: f64,
    /// Activity peak, min.
    pub peak: f64,
    /// Linear carbohydrate absorption time, min.
    pub carb_absorption: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            window: 12,
            dia: 300.0,
            peak: 75.0,
            carb_absorption: 180.0,
        }
    }
}

impl FeatureConfig {
    pub fn state_dim(&self) -> usize {
        2 * self.window + 6
    }

    /// Earliest step with a full glycemia window.
    pub fn first_step(&self) -> usize {
        self.window - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(CoreError::InvalidValue(format!("window {} < 2", self.window)));
        }
        if !(self.dia > self.peak && self.peak > 0.0) {
            return Err(CoreError::InvalidValue(format!(
                "need dia > peak > 0, got dia {} peak {}",
                self.dia, self.peak
            )));
        }
        if !(self.carb_absorption > 0.0) {
            return Err(CoreError::InvalidValue("carb absorption time must be positive".into()));
        }
        Ok(())
    }

    /// Index helpers into the flat state vector.
    pub fn glycemia_newest(&self) -> usize {
        self.window - 1
    }
    pub fn iob_index(&self) -> usize {
        2 * self.window
    }
    pub fn cob_index(&self) -> usize {
        2 * self.window + 1
    }
    pub fn tdd_index(&self) -> usize {
        2 * self.window + 2
    }
    pub fn tod_indices(&self) -> (usize, usize) {
        (2 * self.window + 3, 2 * self.window + 4)
    }
    pub fn weight_index(&self) -> usize {
        2 * self.window + 5
    }

    pub fn feature_names(&self) -> Vec<String> {
        let w = self.window;
        let mut names: Vec<String> = (0..w).map(|k| format!("glycemia_t-{}", 5 * (w - 1 - k))).collect();
        names.extend((0..w).map(|k| format!("insulin_t-{}", 5 * (w - k))));
        names.extend(["iob", "cob", "tdd", "tod_sin", "tod_cos", "weight"].map(String::from));
        names
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub glycemia: Vec<f64>,
    pub insulin: Vec<f64>,
    pub iob: f64,
    pub cob: f64,
    pub tdd: f64,
    pub tod_sin: f64,
    pub tod_cos: f64,
    pub weight: f64,
}

impl StateVector {
    pub fn dim(&self) -> usize {
        self.glycemia.len() + self.insulin.len() + 6
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.glycemia);
        v.extend_from_slice(&self.insulin);
        v.extend([self.iob, self.cob, self.tdd, self.tod_sin, self.tod_cos, self.weight]);
        v
    }

    pub fn from_slice(x: &[f64], window: usize) -> Result<Self> {
        if x.len() != 2 * window + 6 {
            return Err(CoreError::InvalidValue(format!(
                "state of length {} does not match window {window}",
                x.len()
            )));
        }
        let t = &x[2 * window..];
        Ok(Self {
            glycemia: x[..window].to_vec(),
            insulin: x[window..2 * window].to_vec(),
            iob: t[0],
            cob: t[1],
            tdd: t[2],
            tod_sin: t[3],
            tod_cos: t[4],
            weight: t[5],
        })
    }
}

pub fn time_of_day(minute_of_day: f64) -> (f64, f64) {
    let a = std::f64::consts::TAU * minute_of_day / 1440.0;
    (a.sin(), a.cos())
}

/// Insulin activity `a(t) = (t/τ²)·e^{−t/τ}` normalised to unit mass on `[0, dia]`,
/// with `τ = peak` so the maximum falls at `peak`.
pub fn insulin_activity(t: f64, dia: f64, peak: f64) -> f64 {
    if !(0.0..=dia).contains(&t) {
        return 0.0;
    }
    let tau = peak;
    (t / (tau * tau)) * (-t / tau).exp() / gamma2_cdf(dia, tau)
}

fn gamma2_cdf(t: f64, tau: f64) -> f64 {
    1.0 - (-t / tau).exp() * (1.0 + t / tau)
}

/// Fraction of a dose still on board `t` minutes after delivery.
pub fn insulin_survival(t: f64, dia: f64, peak: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    if t >= dia {
        return 0.0;
    }
    (1.0 - gamma2_cdf(t, peak) / gamma2_cdf(dia, peak)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnBoard {
    pub value: f64,
    /// Events dated after `now` that were ignored.
    pub future_excluded: usize,
}

/// Insulin on board from `(time_min, units)` events.
pub fn compute_iob(events: &[(f64, f64)], now: f64, dia: f64, peak: f64) -> Result<OnBoard> {
    if !(dia > peak && peak > 0.0) {
        return Err(CoreError::InvalidValue(format!("need dia > peak > 0, got {dia}, {peak}")));
    }
    let mut value = 0.0;
    let mut future_excluded = 0;
    for &(t, u) in events {
        if t > now {
            future_excluded += 1;
            continue;
        }
        value += u * insulin_survival(now - t, dia, peak);
    }
    if future_excluded > 0 {
        log::warn!("compute_iob: {future_excluded} future insulin events excluded");
    }
    Ok(OnBoard { value, future_excluded })
}

/// Carbohydrates on board from `(time_min, grams)` events with linear absorption.
pub fn compute_cob(events: &[(f64, f64)], now: f64, absorption_time: f64) -> Result<f64> {
    if !(absorption_time > 0.0) {
        return Err(CoreError::InvalidValue(format!("absorption time {absorption_time}")));
    }
    Ok(events
        .iter()
        .filter(|(t, _)| *t <= now)
        .map(|&(t, g)| g * (1.0 - (now - t) / absorption_time).max(0.0))
        .sum())
}

/// Lag kernels for IOB/COB, reusable across logs. Building one state costs
/// O(window + dia + 24 h) regardless of the log length, so controllers can call
/// it on a growing log at every step.
#[derive(Debug, Clone)]
pub struct StateBuilder {
    cfg: FeatureConfig,
    /// Survival weights by lag in steps.
    iob_kernel: Vec<f64>,
    cob_kernel: Vec<f64>,
}

impl StateBuilder {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let step = STEP_MINUTES as f64;
        let iob_lags = (cfg.dia / step).ceil() as usize;
        let iob_kernel = (0..=iob_lags)
            .map(|k| insulin_survival(k as f64 * step, cfg.dia, cfg.peak))
            .collect();
        let cob_lags = (cfg.carb_absorption / step).ceil() as usize;
        let cob_kernel = (0..=cob_lags)
            .map(|k| (1.0 - k as f64 * step / cfg.carb_absorption).max(0.0))
            .collect();
        Ok(Self {
            cfg,
            iob_kernel,
            cob_kernel,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// State at decision step `i` of `log`, or `None` when the history is too short.
    /// Only records `0..=i` are read, and of record `i` only glycemia, carbs and time.
    pub fn state(&self, log: &EpisodeLog, i: usize) -> Option<StateVector> {
        let w = self.cfg.window;
        if i < w - 1 || i >= log.len() {
            return None;
        }
        let recs = &log.records;
        let glycemia = recs[i + 1 - w..=i].iter().map(|r| r.cgm).collect();
        let insulin = (0..w)
            .map(|k| {
                // slot k covers step i − w + k
                let j = i as isize - w as isize + k as isize;
                recs[j.max(0) as usize].total_rate()
            })
            .collect();

        let mut iob = 0.0;
        for (lag, s) in self.iob_kernel.iter().enumerate().skip(1) {
            if lag > i {
                break;
            }
            iob += recs[i - lag].units() * s;
        }
        let mut cob = 0.0;
        for (lag, s) in self.cob_kernel.iter().enumerate() {
            if lag > i {
                break;
            }
            let r = &recs[i - lag];
            if r.announced && r.carbs > 0.0 {
                cob += r.carbs * s;
            }
        }
        let tdd = if i >= STEPS_PER_DAY {
            recs[i - STEPS_PER_DAY..i].iter().map(|r| r.units()).sum()
        } else {
            log.meta.nominal_tdd
        };
        let (tod_sin, tod_cos) = time_of_day(recs[i].minute_of_day() as f64);
        Some(StateVector {
            glycemia,
            insulin,
            iob,
            cob,
            tdd,
            tod_sin,
            tod_cos,
            weight: log.meta.weight,
        })
    }
}

/// Convenience wrapper around [`StateBuilder`] for a single step.
pub fn build_state(log: &EpisodeLog, step_index: usize, cfg: &FeatureConfig) -> Result<Option<StateVector>> {
    Ok(StateBuilder::new(*cfg)?.state(log, step_index))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureScale {
    ZScore { mean: f64, sd: f64 },
    /// Already bounded (time-of-day pair) or constant in the training data.
    PassThrough { constant: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub scales: Vec<FeatureScale>,
    pub fitted_on: String,
}

impl Normalizer {
    /// Identity normalizer of dimension `dim`.
    pub fn identity(dim: usize) -> Self {
        Self {
            scales: vec![FeatureScale::PassThrough { constant: false }; dim],
            fitted_on: "identity".into(),
        }
    }

    /// Fit on row-major `rows` (`n × dim`). Features in `bounded` are passed through.
    pub fn fit(rows: &[f64], dim: usize, bounded: &[usize], fitted_on: impl Into<String>) -> Result<Self> {
        if rows.is_empty() || dim == 0 {
            return Err(CoreError::EmptyInput("normalizer training set"));
        }
        if rows.len() % dim != 0 {
            return Err(CoreError::InvalidValue(format!(
                "{} values are not a whole number of {dim}-dimensional rows",
                rows.len()
            )));
        }
        let n = rows.len() / dim;
        let mut scales = Vec::with_capacity(dim);
        for f in 0..dim {
            if bounded.contains(&f) {
                scales.push(FeatureScale::PassThrough { constant: false });
                continue;
            }
            let col = || rows.iter().skip(f).step_by(dim);
            let first = rows[f];
            if col().all(|x| *x == first) {
                scales.push(FeatureScale::PassThrough { constant: true });
                continue;
            }
            let mean = col().sum::<f64>() / n as f64;
            let var = col().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            if sd > 0.0 && sd.is_finite() {
                scales.push(FeatureScale::ZScore { mean, sd });
            } else {
                scales.push(FeatureScale::PassThrough { constant: true });
            }
        }
        Ok(Self {
            scales,
            fitted_on: fitted_on.into(),
        })
    }

    /// Standard fit for the state layout of `cfg`.
    pub fn fit_states(rows: &[f64], cfg: &FeatureConfig, fitted_on: impl Into<String>) -> Result<Self> {
        let (s, c) = cfg.tod_indices();
        Self::fit(rows, cfg.state_dim(), &[s, c], fitted_on)
    }

    pub fn dim(&self) -> usize {
        self.scales.len()
    }

    pub fn constant_features(&self) -> Vec<usize> {
        self.scales
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, FeatureScale::PassThrough { constant: true }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn apply_one(&self, f: usize, x: f64) -> f64 {
        match self.scales[f] {
            FeatureScale::ZScore { mean, sd } => (x - mean) / sd,
            FeatureScale::PassThrough { .. } => x,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        Ok(x.iter().enumerate().map(|(f, v)| self.apply_one(f, *v)).collect())
    }

    pub fn apply_f32(&self, x: &[f64]) -> Result<Vec<f32>> {
        self.check_dim(x.len())?;
        Ok(x.iter().enumerate().map(|(f, v)| self.apply_one(f, *v) as f32).collect())
    }

    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z.len())?;
        Ok(z
            .iter()
            .zip(&self.scales)
            .map(|(v, s)| match *s {
                FeatureScale::ZScore { mean, sd } => v * sd + mean,
                FeatureScale::PassThrough { .. } => *v,
            })
            .collect())
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(CoreError::InvalidValue(format!(
                "state has {len} features, normalizer expects {}",
                self.dim()
            )));
        }
        Ok(())
    }
}
