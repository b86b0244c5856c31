//! Behavior policy (PID-corrected basal plus a conservative meal-bolus
//! calculator) and the hypoglycemia-prediction safety layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Result, SimError};

pub const MAX_RATE: f64 = 10.0;
pub const MAX_BOLUS: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorConfig {
    /// mg/dL
    pub target_glycemia: f64,
    /// Relative basal change per mg/dL of error.
    pub kp: f64,
    /// Relative basal change per mg/dL·min of integrated error.
    pub ki: f64,
    /// Relative basal change per mg/dL/min of trend.
    pub kd: f64,
    pub bolus_conservatism: f64,
    /// Glycemia above which the calculator adds a correction, mg/dL.
    pub correction_threshold: f64,
    pub manual_modification_rate: f64,
    pub manual_bolus_rate: f64,
    /// Share of the daily dose delivered as basal at zero error.
    pub basal_share: f64,
    /// Bound on the integral contribution (relative to the baseline basal).
    pub integral_limit: f64,
    /// Day-to-day variability of the settings: target offset (mg/dL, uniform ±)
    /// and multiplicative gain spread (uniform ±fraction).
    pub daily_target_jitter: f64,
    pub daily_gain_jitter: f64,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        Self {
            target_glycemia: 110.0,
            kp: 0.003,
            ki: 2e-6,
            kd: 0.1,
            bolus_conservatism: 0.8,
            correction_threshold: 150.0,
            manual_modification_rate: 0.014,
            manual_bolus_rate: 0.014,
            basal_share: 0.5,
            integral_limit: 0.5,
            daily_target_jitter: 15.0,
            daily_gain_jitter: 0.4,
        }
    }
}

impl BehaviorConfig {
    pub fn validate(&self) -> Result<()> {
        for (n, p) in [
            ("manual_modification_rate", self.manual_modification_rate),
            ("manual_bolus_rate", self.manual_bolus_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::InvalidConfig(format!("{n} = {p} is not a probability")));
            }
        }
        if !(self.bolus_conservatism > 0.0 && self.bolus_conservatism <= 1.0) {
            return Err(SimError::InvalidConfig(format!(
                "bolus_conservatism {} outside (0, 1]",
                self.bolus_conservatism
            )));
        }
        if ![self.kp, self.ki, self.kd, self.target_glycemia, self.integral_limit]
            .iter()
            .all(|x| x.is_finite())
        {
            return Err(SimError::InvalidConfig("PID gains must be finite".into()));
        }
        Ok(())
    }

    /// Settings without any randomness (no manual actions, no daily jitter).
    pub fn deterministic(mut self) -> Self {
        self.manual_modification_rate = 0.0;
        self.manual_bolus_rate = 0.0;
        self.daily_target_jitter = 0.0;
        self.daily_gain_jitter = 0.0;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyConfig {
    /// Number of CGM points in the regression (5 min apart).
    pub regression_window: usize,
    /// Prediction horizons, min.
    pub horizons: Vec<f64>,
    /// mg/dL
    pub cutoff_threshold: f64,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            regression_window: 6,
            horizons: vec![15.0, 30.0, 45.0, 60.0],
            cutoff_threshold: 80.0,
        }
    }
}

impl SafetyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.regression_window < 2 {
            return Err(SimError::InvalidConfig("regression_window must be at least 2".into()));
        }
        if self.horizons.is_empty() || self.horizons.iter().any(|h| !(15.0..=60.0).contains(h)) {
            return Err(SimError::InvalidConfig(format!(
                "horizons {:?} must be non-empty and within [15, 60] min",
                self.horizons
            )));
        }
        Ok(())
    }
}

/// What the patient's therapy settings say about them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientProxy {
    pub tdd: f64,
    pub weight: f64,
    pub carb_ratio: f64,
    /// mg/dL per U
    pub correction_factor: f64,
}

impl PatientProxy {
    pub fn from_params(p: &crate::glucosim::PatientParams) -> Self {
        Self {
            tdd: p.nominal_tdd,
            weight: p.weight,
            carb_ratio: p.carb_ratio,
            correction_factor: p.correction_factor(),
        }
    }

    pub fn baseline_basal(&self, basal_share: f64) -> f64 {
        self.tdd * basal_share / 24.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BolusOutcome {
    pub units: f64,
    pub clamped: bool,
}

/// `conservatism·(carbs/carb_ratio + max(0, glycemia − threshold)/correction_factor)`,
/// clamped to `[0, 25]` U.
pub fn bolus_calculator(
    carbs: f64,
    glycemia: f64,
    carb_ratio: f64,
    correction_factor: f64,
    cfg: &BehaviorConfig,
) -> Result<BolusOutcome> {
    if !(carb_ratio > 0.0) {
        return Err(SimError::InvalidConfig(format!("carb ratio {carb_ratio} must be positive")));
    }
    if !(correction_factor > 0.0) {
        return Err(SimError::InvalidConfig(format!(
            "correction factor {correction_factor} must be positive"
        )));
    }
    let raw = cfg.bolus_conservatism
        * (carbs.max(0.0) / carb_ratio + (glycemia - cfg.correction_threshold).max(0.0) / correction_factor);
    let units = raw.clamp(0.0, MAX_BOLUS);
    Ok(BolusOutcome {
        units,
        clamped: units != raw,
    })
}

/// Least-squares line through `y` sampled every `dt` minutes; returns
/// (slope per minute, value of the fit at the last sample).
pub fn ols_line(y: &[f64], dt: f64) -> (f64, f64) {
    let n = y.len() as f64;
    let t_mean = dt * (n - 1.0) / 2.0;
    let y_mean = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (k, v) in y.iter().enumerate() {
        let dt_k = k as f64 * dt - t_mean;
        sxy += dt_k * (v - y_mean);
        sxx += dt_k * dt_k;
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, y_mean + slope * (dt * (n - 1.0) - t_mean))
}

/// Linear-regression hypoglycemia predictor over the last `regression_window`
/// readings (5 min apart, newest last). `None` when the history is too short.
pub fn hypo_risk(history: &[f64], cfg: &SafetyConfig) -> Option<bool> {
    let w = cfg.regression_window;
    if history.len() < w {
        return None;
    }
    let (slope, last) = ols_line(&history[history.len() - w..], 5.0);
    Some(cfg.horizons.iter().any(|h| last + slope * h < cfg.cutoff_threshold))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafetyOutcome {
    pub rate: f64,
    pub bolus: f64,
    pub overridden: bool,
    pub rate_clamped: bool,
    pub hypo_risk: bool,
}

/// The safety layer keeps a counter of checks skipped for lack of history.
#[derive(Debug, Clone, Default)]
pub struct SafetyLayer {
    pub cfg: SafetyConfig,
    pub short_history_warnings: usize,
}

impl SafetyLayer {
    pub fn new(cfg: SafetyConfig) -> Self {
        Self {
            cfg,
            short_history_warnings: 0,
        }
    }

    pub fn risk(&mut self, history: &[f64]) -> bool {
        match hypo_risk(history, &self.cfg) {
            Some(r) => r,
            None => {
                self.short_history_warnings += 1;
                log::debug!("hypo_risk: {} points < window {}", history.len(), self.cfg.regression_window);
                false
            }
        }
    }

    pub fn apply(&mut self, raw_rate: f64, raw_bolus: f64, history: &[f64]) -> SafetyOutcome {
        let risk = self.risk(history);
        finish_safety(raw_rate, raw_bolus, risk)
    }
}

/// Insulin cutoff on predicted hypoglycemia; otherwise the rate is clamped to `[0, 10]`.
pub fn apply_safety(raw_rate: f64, raw_bolus: f64, history: &[f64], cfg: &SafetyConfig) -> SafetyOutcome {
    finish_safety(raw_rate, raw_bolus, hypo_risk(history, cfg).unwrap_or(false))
}

fn finish_safety(raw_rate: f64, raw_bolus: f64, risk: bool) -> SafetyOutcome {
    if risk {
        return SafetyOutcome {
            rate: 0.0,
            bolus: 0.0,
            overridden: true,
            rate_clamped: false,
            hypo_risk: true,
        };
    }
    let (rate, rate_clamped) = clamp_rate(raw_rate);
    SafetyOutcome {
        rate,
        bolus: raw_bolus,
        overridden: false,
        rate_clamped,
        hypo_risk: false,
    }
}

/// Clamp to `[0, 10]` U/h; non-finite rates become 0. Returns whether anything changed.
pub fn clamp_rate(rate: f64) -> (f64, bool) {
    if !rate.is_finite() {
        return (0.0, true);
    }
    let c = rate.clamp(0.0, MAX_RATE);
    (c, c != rate)
}

/// Per-episode controller memory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PidState {
    /// Integrated error, mg/dL·min.
    pub integral: f64,
    pub day: Option<u32>,
    pub target_offset: f64,
    pub gain_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BehaviorAction {
    pub rate: f64,
    pub bolus: f64,
    /// Calculator output before any manual action.
    pub calculator_bolus: f64,
    pub bolus_clamped: bool,
    pub rate_clamped: bool,
    pub manual_modified: bool,
    pub manual_bolus: bool,
}

/// One decision of the behavior policy. `history` holds CGM readings, newest
/// last; `t_min` is absolute time (used for the day-level setting draws).
pub fn behavior_action<R: Rng + ?Sized>(
    history: &[f64],
    announced_carbs: f64,
    t_min: u32,
    proxy: &PatientProxy,
    cfg: &BehaviorConfig,
    pid: &mut PidState,
    rng: &mut R,
) -> Result<BehaviorAction> {
    let g = *history.last().ok_or(SimError::InvalidConfig("empty CGM history".into()))?;
    let day = t_min / 1440;
    if pid.day != Some(day) {
        pid.day = Some(day);
        pid.target_offset = if cfg.daily_target_jitter > 0.0 {
            rng.random_range(-cfg.daily_target_jitter..=cfg.daily_target_jitter)
        } else {
            0.0
        };
        pid.gain_scale = if cfg.daily_gain_jitter > 0.0 {
            1.0 + rng.random_range(-cfg.daily_gain_jitter..=cfg.daily_gain_jitter)
        } else {
            1.0
        };
    }
    let e = g - (cfg.target_glycemia + pid.target_offset);
    let trend = if history.len() >= 3 {
        ols_line(&history[history.len().saturating_sub(4)..], 5.0).0
    } else {
        0.0
    };
    if cfg.ki > 0.0 {
        let lim = cfg.integral_limit / cfg.ki;
        pid.integral = (pid.integral + e * 5.0).clamp(-lim, lim);
    }
    let k = pid.gain_scale;
    let base = proxy.baseline_basal(cfg.basal_share);
    let raw = base * (1.0 + k * (cfg.kp * e + cfg.ki * pid.integral + cfg.kd * trend));
    let (rate, rate_clamped) = clamp_rate(raw);

    let mut out = BehaviorAction {
        rate,
        bolus: 0.0,
        calculator_bolus: 0.0,
        bolus_clamped: false,
        rate_clamped,
        manual_modified: false,
        manual_bolus: false,
    };
    if announced_carbs > 0.0 {
        let calc = bolus_calculator(announced_carbs, g, proxy.carb_ratio, proxy.correction_factor, cfg)?;
        out.calculator_bolus = calc.units;
        out.bolus_clamped = calc.clamped;
        let mut bolus = calc.units;
        // draws are made unconditionally so the random stream does not depend on outcomes
        let (u_mod, factor) = (rng.random::<f64>(), rng.random_range(0.7..=1.3));
        let (u_extra, extra) = (rng.random::<f64>(), rng.random_range(0.1..=2.0));
        if u_mod < cfg.manual_modification_rate {
            bolus *= factor;
            out.manual_modified = true;
        }
        if u_extra < cfg.manual_bolus_rate {
            bolus += extra;
            out.manual_bolus = true;
        }
        let clamped = bolus.clamp(0.0, MAX_BOLUS);
        out.bolus_clamped |= clamped != bolus;
        out.bolus = clamped;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn proxy() -> PatientProxy {
        PatientProxy {
            tdd: 48.0,
            weight: 80.0,
            carb_ratio: 10.0,
            correction_factor: 1800.0 / 48.0,
        }
    }

    #[test]
    fn calculator_examples() {
        let cfg = BehaviorConfig {
            bolus_conservatism: 1.0,
            correction_threshold: 150.0,
            ..BehaviorConfig::default()
        };
        assert_eq!(bolus_calculator(50.0, 110.0, 10.0, 40.0, &cfg).unwrap().units, 5.0);
        let c8 = BehaviorConfig {
            bolus_conservatism: 0.8,
            ..cfg
        };
        assert!((bolus_calculator(50.0, 110.0, 10.0, 40.0, &c8).unwrap().units - 4.0).abs() < 1e-12);
        // 100 g at ratio 5 is 20 U on its own; the correction at 400 mg/dL pushes it past 25
        let plain = bolus_calculator(100.0, 110.0, 5.0, 40.0, &cfg).unwrap();
        assert_eq!((plain.units, plain.clamped), (20.0, false));
        let big = bolus_calculator(100.0, 400.0, 5.0, 40.0, &cfg).unwrap();
        assert_eq!(big.units, 25.0);
        assert!(big.clamped);
        // correction part
        assert_eq!(bolus_calculator(50.0, 190.0, 10.0, 40.0, &cfg).unwrap().units, 6.0);
        assert!(bolus_calculator(50.0, 110.0, 0.0, 40.0, &cfg).is_err());
    }

    #[test]
    fn hypo_risk_examples() {
        let cfg = SafetyConfig::default();
        assert_eq!(hypo_risk(&[120.0; 6], &cfg), Some(false));
        assert_eq!(hypo_risk(&[120.0, 115.0, 110.0, 105.0, 100.0, 95.0], &cfg), Some(true));
        let rising: Vec<f64> = (0..6).map(|k| 75.0 + 10.0 * k as f64).collect();
        assert_eq!(hypo_risk(&rising, &cfg), Some(false));
        assert_eq!(hypo_risk(&[100.0; 3], &cfg), None);
        // only the last window matters
        let mut h = vec![40.0; 10];
        h.extend([120.0; 6]);
        assert_eq!(hypo_risk(&h, &cfg), Some(false));
    }

    #[test]
    fn ols_recovers_exact_line() {
        let y: Vec<f64> = (0..6).map(|k| 120.0 - 5.0 * k as f64).collect();
        let (slope, last) = ols_line(&y, 5.0);
        assert!((slope + 1.0).abs() < 1e-12);
        assert!((last - 95.0).abs() < 1e-12);
        assert!((last + 30.0 * slope - 65.0).abs() < 1e-12);
    }

    #[test]
    fn safety_examples() {
        let cfg = SafetyConfig::default();
        let falling = [120.0, 115.0, 110.0, 105.0, 100.0, 95.0];
        let o = apply_safety(4.2, 3.0, &falling, &cfg);
        assert_eq!((o.rate, o.bolus, o.overridden), (0.0, 0.0, true));
        let flat = [120.0; 6];
        let o = apply_safety(4.2, 3.0, &flat, &cfg);
        assert_eq!((o.rate, o.bolus, o.overridden), (4.2, 3.0, false));
        let o = apply_safety(12.0, 1.0, &flat, &cfg);
        assert_eq!((o.rate, o.bolus, o.overridden, o.rate_clamped), (10.0, 1.0, false, true));
        let mut layer = SafetyLayer::new(cfg);
        assert!(!layer.risk(&[60.0]));
        assert_eq!(layer.short_history_warnings, 1);
    }

    #[test]
    fn config_validation() {
        assert!(SafetyConfig {
            regression_window: 1,
            ..SafetyConfig::default()
        }
        .validate()
        .is_err());
        assert!(SafetyConfig {
            horizons: vec![90.0],
            ..SafetyConfig::default()
        }
        .validate()
        .is_err());
        assert!(BehaviorConfig {
            manual_bolus_rate: 1.5,
            ..BehaviorConfig::default()
        }
        .validate()
        .is_err());
        BehaviorConfig::default().validate().unwrap();
    }

    #[test]
    fn at_target_returns_baseline_basal() {
        let cfg = BehaviorConfig::default().deterministic();
        let mut pid = PidState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = behavior_action(&[110.0; 12], 0.0, 0, &proxy(), &cfg, &mut pid, &mut rng).unwrap();
        assert!((a.rate - 48.0 * 0.5 / 24.0).abs() < 1e-12);
        assert_eq!(a.bolus, 0.0);
    }

    #[test]
    fn meal_bolus_example() {
        let cfg = BehaviorConfig::default().deterministic();
        let mut pid = PidState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = behavior_action(&[110.0; 12], 60.0, 0, &proxy(), &cfg, &mut pid, &mut rng).unwrap();
        assert!((a.bolus - 4.8).abs() < 1e-12);
    }

    #[test]
    fn manual_modification_is_flagged() {
        let cfg = BehaviorConfig {
            manual_modification_rate: 1.0,
            ..BehaviorConfig::default().deterministic()
        };
        let mut pid = PidState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = behavior_action(&[110.0; 12], 60.0, 0, &proxy(), &cfg, &mut pid, &mut rng).unwrap();
        assert!(a.manual_modified);
        assert_ne!(a.bolus, a.calculator_bolus);
        assert!((a.bolus / a.calculator_bolus - 1.0).abs() <= 0.3 + 1e-12);
    }

    #[test]
    fn deterministic_without_manual_actions() {
        let cfg = BehaviorConfig::default().deterministic();
        let hist: Vec<f64> = (0..12).map(|k| 150.0 + 3.0 * k as f64).collect();
        let run = |seed| {
            let mut pid = PidState::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|t| behavior_action(&hist, 45.0, t * 5, &proxy(), &cfg, &mut pid, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn rates_and_boluses_in_bounds() {
        let cfg = BehaviorConfig::default();
        let mut pid = PidState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 0..2000u32 {
            let g = 40.0 + (k as f64 * 0.37).sin().abs() * 560.0;
            let hist = [g - 20.0, g - 10.0, g];
            let carbs = if k % 50 == 0 { 200.0 } else { 0.0 };
            let a = behavior_action(&hist, carbs, k * 5, &proxy(), &cfg, &mut pid, &mut rng).unwrap();
            assert!((0.0..=MAX_RATE).contains(&a.rate));
            assert!((0.0..=MAX_BOLUS).contains(&a.bolus));
        }
    }
}
