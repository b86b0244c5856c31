//! Minimal-model virtual patient.
//!
//! Per minute (explicit Euler, five substeps per 5-minute control step):
//!
//! ```text
//! dS1/dt = u − S1/t_I                     dS2/dt = (S1 − S2)/t_I
//! dI/dt  = S2/(t_I·V_I·w) − k_e·I          dX/dt  = −p2·X + p2·S_I·I
//! dD1/dt = −D1/t_D                        dD2/dt = (D1 − D2)/t_D
//! Ra     = 0.8·D2/t_D                     (g/min)
//! dG/dt  = −X·G + egp − k_g·(G − G_b) + 1000·Ra/(V_G·w)
//! ```
//!
//! Boluses enter S1 and meals enter D1 at the start of the step. `V_G` is
//! 1.6 dL/kg so that `Ra` in mg/min yields mg/dL/min. `S_I` is calibrated so
//! that the patient's `basal_need` holds `G_b` exactly at equilibrium.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use glyrl_core::episode::{MealEvent, MINUTES_PER_DAY, STEP_MINUTES};

use crate::{Result, SimError};

pub const G_MIN: f64 = 20.0;
pub const G_MAX: f64 = 600.0;
pub const SUBSTEPS: u32 = 5;
/// Glucose distribution volume, dL/kg.
pub const GLUCOSE_VOLUME: f64 = 1.6;
pub const CARB_BIOAVAILABILITY: f64 = 0.8;
pub const CGM_AR: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientParams {
    pub id: u32,
    /// kg
    pub weight: f64,
    /// S_I: remote-effect gain per unit plasma insulin (1/min per U/L).
    pub insulin_sensitivity: f64,
    /// Therapy carb ratio used by the bolus calculator, g/U.
    pub carb_ratio: f64,
    /// Basal rate that holds the fasting set-point, U/h.
    pub basal_need: f64,
    /// mg/dL/min
    pub egp: f64,
    /// t_I, min
    pub insulin_action_time: f64,
    /// t_D, min
    pub carb_absorption_time: f64,
    /// Stationary sd of the CGM error, mg/dL.
    pub cgm_noise_sd: f64,
    pub seed: u64,
    /// G_b, mg/dL
    pub fasting_glucose: f64,
    /// k_g, 1/min
    pub glucose_effectiveness: f64,
    /// k_e, 1/min
    pub insulin_clearance: f64,
    /// V_I, L/kg
    pub insulin_volume: f64,
    /// p2, 1/min
    pub p2: f64,
    /// Total daily dose the patient's therapy settings are based on, U.
    pub nominal_tdd: f64,
}

impl PatientParams {
    /// Fill `insulin_sensitivity` from the equilibrium condition at `basal_need`.
    pub fn calibrate(mut self) -> Self {
        self.insulin_sensitivity = self.egp / (self.fasting_glucose * self.basal_plasma_insulin(self.basal_need));
        self
    }

    /// Steady-state plasma insulin (U/L) under a constant rate in U/h.
    pub fn basal_plasma_insulin(&self, rate: f64) -> f64 {
        (rate / 60.0) / (self.insulin_volume * self.weight * self.insulin_clearance)
    }

    /// Same patient with insulin sensitivity scaled by `factor` (the basal need
    /// that holds the fasting set-point scales by `1/factor`); therapy settings
    /// are left as they were.
    pub fn with_sensitivity_scale(mut self, factor: f64) -> Self {
        self.insulin_sensitivity *= factor;
        self.basal_need /= factor;
        self
    }

    /// Correction factor from the 1800 rule on the therapy TDD, mg/dL per U.
    pub fn correction_factor(&self) -> f64 {
        1800.0 / self.nominal_tdd
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("weight", self.weight),
            ("insulin_sensitivity", self.insulin_sensitivity),
            ("carb_ratio", self.carb_ratio),
            ("basal_need", self.basal_need),
            ("insulin_action_time", self.insulin_action_time),
            ("carb_absorption_time", self.carb_absorption_time),
            ("fasting_glucose", self.fasting_glucose),
            ("insulin_clearance", self.insulin_clearance),
            ("insulin_volume", self.insulin_volume),
            ("p2", self.p2),
            ("nominal_tdd", self.nominal_tdd),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::InvalidParams(format!("{name} = {v} must be positive")));
            }
        }
        for (name, v) in [
            ("egp", self.egp),
            ("glucose_effectiveness", self.glucose_effectiveness),
            ("cgm_noise_sd", self.cgm_noise_sd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SimError::InvalidParams(format!("{name} = {v} must be non-negative")));
            }
        }
        if !(40.0..=150.0).contains(&self.weight) {
            return Err(SimError::InvalidParams(format!("weight {} outside [40, 150] kg", self.weight)));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draw patient `index` of the population identified by `population_seed`.
///
/// Weight ~ N(77.1, 17.5) clipped to [40, 150] kg; the per-kg daily insulin
/// requirement is log-normal with mean 0.62 U/kg/day (sd 0.2), giving a
/// population TDD of roughly 44 ± 18 U.
pub fn sample_patient(population_seed: u64, index: u32) -> PatientParams {
    let seed = mix_seed(population_seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weight: f64 = Normal::new(77.1f64, 17.5).unwrap().sample(&mut rng);
    let weight = weight.clamp(40.0, 150.0);
    let (m, s) = (0.62f64, 0.2f64);
    let sigma2 = (1.0 + (s / m).powi(2)).ln();
    let per_kg = LogNormal::new(m.ln() - sigma2 / 2.0, sigma2.sqrt())
        .unwrap()
        .sample(&mut rng)
        .clamp(0.25, 1.4);
    let tdd = per_kg * weight;
    let jitter = |rng: &mut ChaCha8Rng, sd: f64| LogNormal::new(0.0, sd).unwrap().sample(rng);
    // therapy settings are estimates of the true needs, each off by ~10 %
    let basal_need = 0.45 * tdd / 24.0 * jitter(&mut rng, 0.1);
    let egp = rng.random_range(0.55..0.85);
    let fasting_glucose = rng.random_range(110.0..135.0);
    let mut p = PatientParams {
        id: index,
        weight,
        insulin_sensitivity: 0.0,
        carb_ratio: 0.0,
        basal_need,
        egp,
        insulin_action_time: rng.random_range(50.0..75.0),
        carb_absorption_time: rng.random_range(35.0..50.0),
        cgm_noise_sd: 5.0,
        seed,
        fasting_glucose,
        glucose_effectiveness: rng.random_range(0.0002..0.0006),
        insulin_clearance: 0.138,
        insulin_volume: 0.12,
        p2: rng.random_range(0.012..0.02),
        nominal_tdd: tdd,
    }
    .calibrate();
    p.carb_ratio = ideal_carb_ratio(&p) * jitter(&mut rng, 0.1);
    p
}

/// Carbs (g) whose eventual glucose rise is cancelled by 1 U of insulin, by the
/// linearised model at the fasting set-point.
pub fn ideal_carb_ratio(p: &PatientParams) -> f64 {
    // total glucose lowering of one unit: G_b · S_I · ∫I = G_b · S_I / (V_I·w·k_e)
    let per_unit = p.fasting_glucose * p.insulin_sensitivity / (p.insulin_volume * p.weight * p.insulin_clearance);
    let per_gram = 1000.0 * CARB_BIOAVAILABILITY / (GLUCOSE_VOLUME * p.weight);
    per_unit / per_gram
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    /// G, mg/dL
    pub plasma_glucose: f64,
    /// U
    pub s1: f64,
    pub s2: f64,
    /// I, U/L
    pub plasma_insulin: f64,
    /// X, 1/min
    pub remote_insulin_effect: f64,
    /// g
    pub d1: f64,
    pub d2: f64,
    /// Minutes since midnight.
    pub clock: u32,
    pub day_index: u32,
    /// Current CGM error, mg/dL.
    pub cgm_error: f64,
}

impl SimState {
    /// Equilibrium under a constant `rate` (U/h) with no carbohydrates on board,
    /// starting at midnight of day 0.
    pub fn steady(p: &PatientParams, rate: f64) -> Self {
        let u = rate / 60.0;
        let i = p.basal_plasma_insulin(rate);
        let x = p.insulin_sensitivity * i;
        // −X·G + egp − k_g·(G − G_b) = 0
        let g = ((p.egp + p.glucose_effectiveness * p.fasting_glucose) / (x + p.glucose_effectiveness)).clamp(G_MIN, G_MAX);
        Self {
            plasma_glucose: g,
            s1: u * p.insulin_action_time,
            s2: u * p.insulin_action_time,
            plasma_insulin: i,
            remote_insulin_effect: x,
            d1: 0.0,
            d2: 0.0,
            clock: 0,
            day_index: 0,
            cgm_error: 0.0,
        }
    }

    pub fn t_min(&self) -> u32 {
        self.day_index * MINUTES_PER_DAY + self.clock
    }

    pub fn cgm(&self) -> f64 {
        (self.plasma_glucose + self.cgm_error).clamp(G_MIN, G_MAX)
    }
}

/// Advance one 5-minute control step. `noise` is a standard-normal draw driving
/// the AR(1) CGM error (ignored when the patient's noise sd is zero).
pub fn step(
    p: &PatientParams,
    state: &SimState,
    insulin_rate: f64,
    bolus: f64,
    meal_carbs: f64,
    noise: f64,
) -> Result<(SimState, f64)> {
    for (name, v) in [("insulin_rate", insulin_rate), ("bolus", bolus), ("meal_carbs", meal_carbs), ("noise", noise)] {
        if !v.is_finite() {
            return Err(SimError::NonFinite(name));
        }
    }
    if insulin_rate < 0.0 || bolus < 0.0 || meal_carbs < 0.0 {
        return Err(SimError::NegativeInput {
            rate: insulin_rate,
            bolus,
            carbs: meal_carbs,
        });
    }
    let mut s = *state;
    s.s1 += bolus;
    s.d1 += meal_carbs;
    let u = insulin_rate / 60.0;
    let (t_i, t_d) = (p.insulin_action_time, p.carb_absorption_time);
    let v_g = GLUCOSE_VOLUME * p.weight;
    let h = 1.0;
    for _ in 0..SUBSTEPS {
        let ra = CARB_BIOAVAILABILITY * s.d2 / t_d;
        let d_s1 = u - s.s1 / t_i;
        let d_s2 = (s.s1 - s.s2) / t_i;
        let d_i = s.s2 / (t_i * p.insulin_volume * p.weight) - p.insulin_clearance * s.plasma_insulin;
        let d_x = -p.p2 * s.remote_insulin_effect + p.p2 * p.insulin_sensitivity * s.plasma_insulin;
        let d_d1 = -s.d1 / t_d;
        let d_d2 = (s.d1 - s.d2) / t_d;
        let d_g = -s.remote_insulin_effect * s.plasma_glucose + p.egp
            - p.glucose_effectiveness * (s.plasma_glucose - p.fasting_glucose)
            + 1000.0 * ra / v_g;
        s.s1 = (s.s1 + h * d_s1).max(0.0);
        s.s2 = (s.s2 + h * d_s2).max(0.0);
        s.plasma_insulin = (s.plasma_insulin + h * d_i).max(0.0);
        s.remote_insulin_effect = (s.remote_insulin_effect + h * d_x).max(0.0);
        s.d1 = (s.d1 + h * d_d1).max(0.0);
        s.d2 = (s.d2 + h * d_d2).max(0.0);
        s.plasma_glucose = (s.plasma_glucose + h * d_g).clamp(G_MIN, G_MAX);
    }
    s.clock += STEP_MINUTES;
    if s.clock >= MINUTES_PER_DAY {
        s.clock -= MINUTES_PER_DAY;
        s.day_index += 1;
    }
    s.cgm_error = if p.cgm_noise_sd > 0.0 {
        CGM_AR * s.cgm_error + (1.0 - CGM_AR * CGM_AR).sqrt() * p.cgm_noise_sd * noise
    } else {
        0.0
    };
    let cgm = s.cgm();
    Ok((s, cgm))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MealConfig {
    /// Main meal times, minutes after midnight.
    pub times: [u32; 3],
    pub jitter_min: u32,
    pub carbs_min: f64,
    pub carbs_max: f64,
    pub snack_probability: f64,
    pub snack_min: f64,
    pub snack_max: f64,
}

impl Default for MealConfig {
    fn default() -> Self {
        Self {
            times: [450, 750, 1170],
            jitter_min: 45,
            carbs_min: 40.0,
            carbs_max: 100.0,
            snack_probability: 0.2,
            snack_min: 15.0,
            snack_max: 30.0,
        }
    }
}

/// Daily meal plan on the 5-minute grid: three meals with ±jitter and an
/// optional afternoon snack. All meals are marked announced.
pub fn meal_schedule(cfg: &MealConfig, seed: u64, days: u32) -> Vec<MealEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6d65_616c));
    let snap = |t: i64| (t.max(0) as u32 / STEP_MINUTES) * STEP_MINUTES;
    let mut out = Vec::new();
    for d in 0..days {
        let base = (d * MINUTES_PER_DAY) as i64;
        for &t in &cfg.times {
            let j = rng.random_range(-(cfg.jitter_min as i64)..=cfg.jitter_min as i64);
            out.push(MealEvent {
                t_min: snap(base + t as i64 + j),
                carbs: rng.random_range(cfg.carbs_min..=cfg.carbs_max).round(),
                announced: true,
            });
        }
        if rng.random_bool(cfg.snack_probability) {
            let t = rng.random_range(900..1020) as i64;
            out.push(MealEvent {
                t_min: snap(base + t),
                carbs: rng.random_range(cfg.snack_min..=cfg.snack_max).round(),
                announced: true,
            });
        }
    }
    out.sort_by_key(|m| m.t_min);
    out
}

/// Open-loop intervals `[start, end)` in absolute minutes: each day independently
/// gets one interval with probability `probability`, lasting `min_h..max_h` hours.
pub fn open_loop_schedule(seed: u64, days: u32, probability: f64, min_h: f64, max_h: f64) -> Vec<(u32, u32)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6761_7073));
    let mut out = Vec::new();
    for d in 0..days {
        let hit = rng.random_bool(probability.clamp(0.0, 1.0));
        let len = (rng.random_range(min_h..=max_h.max(min_h)) * 60.0) as u32;
        let start = rng.random_range(0..MINUTES_PER_DAY);
        if hit && len > 0 {
            let s = d * MINUTES_PER_DAY + (start / STEP_MINUTES) * STEP_MINUTES;
            let e = (s + len).min((d + 1) * MINUTES_PER_DAY);
            out.push((s, e));
        }
    }
    out
}
