//! Closed-loop episode rollouts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use glyrl_core::episode::{EpisodeLog, EpisodeMeta, MealEvent, StepFlags, StepRecord, MINUTES_PER_DAY, STEP_MINUTES};

use crate::controllers::{
    behavior_action, clamp_rate, BehaviorConfig, PatientProxy, PidState, SafetyConfig, SafetyLayer, MAX_BOLUS,
};
use crate::glucosim::{mix_seed, step, PatientParams, SimState};
use crate::Result;

/// What a controller sees at one step. `log` holds every past record plus a
/// provisional record for the current step whose insulin fields are zero.
pub struct Observation<'a> {
    pub log: &'a EpisodeLog,
    pub step: usize,
    pub cgm: f64,
    pub announced_carbs: f64,
    pub t_min: u32,
}

impl Observation<'_> {
    /// CGM readings up to and including the current one.
    pub fn cgm_history(&self, n: usize) -> Vec<f64> {
        let from = (self.step + 1).saturating_sub(n);
        self.log.records[from..=self.step].iter().map(|r| r.cgm).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlAction {
    /// U/h
    pub rate: f64,
    /// U
    pub bolus: f64,
    pub manual_modified: bool,
    pub manual_bolus: bool,
    pub bolus_clamped: bool,
}

pub trait Controller {
    fn act(&mut self, obs: &Observation<'_>) -> ControlAction;
}

impl<F: FnMut(&Observation<'_>) -> ControlAction> Controller for F {
    fn act(&mut self, obs: &Observation<'_>) -> ControlAction {
        self(obs)
    }
}

/// Constant basal, no boluses.
pub struct ConstantRate(pub f64);

impl Controller for ConstantRate {
    fn act(&mut self, _: &Observation<'_>) -> ControlAction {
        ControlAction {
            rate: self.0,
            ..ControlAction::default()
        }
    }
}

pub struct BehaviorController {
    pub cfg: BehaviorConfig,
    pub proxy: PatientProxy,
    pid: PidState,
    rng: ChaCha8Rng,
}

impl BehaviorController {
    pub fn new(cfg: BehaviorConfig, proxy: PatientProxy, seed: u64) -> Self {
        Self {
            cfg,
            proxy,
            pid: PidState::default(),
            rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6265_6876)),
        }
    }
}

impl Controller for BehaviorController {
    fn act(&mut self, obs: &Observation<'_>) -> ControlAction {
        let hist = obs.cgm_history(12);
        match behavior_action(
            &hist,
            obs.announced_carbs,
            obs.t_min,
            &self.proxy,
            &self.cfg,
            &mut self.pid,
            &mut self.rng,
        ) {
            Ok(a) => ControlAction {
                rate: a.rate,
                bolus: a.bolus,
                manual_modified: a.manual_modified,
                manual_bolus: a.manual_bolus,
                bolus_clamped: a.bolus_clamped,
            },
            Err(e) => {
                log::warn!("behavior policy failed at step {}: {e}", obs.step);
                ControlAction::default()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeOptions {
    pub announce_meals: bool,
    pub safety_on: bool,
    pub noise_on: bool,
    pub safety: SafetyConfig,
    /// Open-loop intervals `[start, end)` in absolute minutes; the controller's
    /// rate is replaced by `open_loop_basal` (its boluses are kept).
    pub open_loop: Vec<(u32, u32)>,
    pub open_loop_basal: Option<f64>,
    /// Seed of the CGM noise stream.
    pub seed: u64,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        Self {
            announce_meals: true,
            safety_on: true,
            noise_on: true,
            safety: SafetyConfig::default(),
            open_loop: Vec::new(),
            open_loop_basal: None,
            seed: 0,
        }
    }
}

/// Roll `controller` out on `patient` for `days` days, starting at midnight from
/// the fasting equilibrium. One record per 5-minute step.
pub fn run_episode(
    patient: &PatientParams,
    controller: &mut dyn Controller,
    days: u32,
    meals: &[MealEvent],
    opts: &EpisodeOptions,
) -> Result<EpisodeLog> {
    patient.validate()?;
    opts.safety.validate()?;
    let mut p = *patient;
    if !opts.noise_on {
        p.cgm_noise_sd = 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(p.seed, opts.seed));
    let mut state = SimState::steady(&p, p.basal_need);
    if p.cgm_noise_sd > 0.0 {
        let z: f64 = StandardNormal.sample(&mut rng);
        state.cgm_error = p.cgm_noise_sd * z;
    }
    let mut cgm = state.cgm();

    let steps = (days * MINUTES_PER_DAY / STEP_MINUTES) as usize;
    let logged_meals: Vec<MealEvent> = meals
        .iter()
        .filter(|m| m.t_min < days * MINUTES_PER_DAY)
        .map(|m| MealEvent {
            announced: m.announced && opts.announce_meals,
            ..*m
        })
        .collect();
    let mut log = EpisodeLog::new(EpisodeMeta {
        patient_id: p.id,
        weight: p.weight,
        nominal_tdd: p.nominal_tdd,
        patient: serde_json::to_value(patient).unwrap_or(serde_json::Value::Null),
        meals: logged_meals.clone(),
    });
    let mut safety = SafetyLayer::new(opts.safety.clone());
    let fallback = opts
        .open_loop_basal
        .unwrap_or_else(|| PatientProxy::from_params(&p).baseline_basal(0.5));
    let mut meal_idx = 0;

    for k in 0..steps {
        let t = state.t_min();
        let (mut carbs_true, mut carbs_announced) = (0.0, 0.0);
        while meal_idx < logged_meals.len() && logged_meals[meal_idx].t_min < t + STEP_MINUTES {
            let m = logged_meals[meal_idx];
            if m.t_min >= t {
                carbs_true += m.carbs;
                if m.announced {
                    carbs_announced += m.carbs;
                }
            }
            meal_idx += 1;
        }
        log.push(
            StepRecord {
                t_min: t,
                cgm,
                insulin_rate: 0.0,
                bolus: 0.0,
                carbs: carbs_announced,
                announced: carbs_announced > 0.0,
                day: state.day_index,
            },
            StepFlags::default(),
        );
        let action = controller.act(&Observation {
            log: &log,
            step: k,
            cgm,
            announced_carbs: carbs_announced,
            t_min: t,
        });

        let mut flags = StepFlags {
            closed_loop: !opts.open_loop.iter().any(|(s, e)| (*s..*e).contains(&t)),
            manual_modified: action.manual_modified,
            manual_bolus: action.manual_bolus,
            bolus_clamped: action.bolus_clamped,
            ..StepFlags::default()
        };
        let raw_rate = if flags.closed_loop { action.rate } else { fallback };
        let (mut rate, rate_clamped) = clamp_rate(raw_rate);
        flags.action_clamped = rate_clamped;
        let mut bolus = if action.bolus.is_finite() { action.bolus } else { 0.0 };
        if bolus != bolus.clamp(0.0, MAX_BOLUS) {
            flags.bolus_clamped = true;
            bolus = bolus.clamp(0.0, MAX_BOLUS);
        }
        if opts.safety_on {
            let from = (k + 1).saturating_sub(opts.safety.regression_window);
            let hist: Vec<f64> = log.records[from..=k].iter().map(|r| r.cgm).collect();
            let out = safety.apply(rate, bolus, &hist);
            flags.hypo_risk = out.hypo_risk;
            flags.safety_override = out.overridden;
            rate = out.rate;
            bolus = out.bolus;
        }
        let rec = log.records.last_mut().expect("pushed above");
        rec.insulin_rate = rate;
        rec.bolus = bolus;
        *log.flags.last_mut().expect("pushed above") = flags;

        let z: f64 = if p.cgm_noise_sd > 0.0 { StandardNormal.sample(&mut rng) } else { 0.0 };
        let (next, reading) = step(&p, &state, rate, bolus, carbs_true, z)?;
        state = next;
        cgm = reading;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glucosim::{meal_schedule, sample_patient, MealConfig, G_MAX};

    fn quiet() -> EpisodeOptions {
        EpisodeOptions {
            noise_on: false,
            safety_on: false,
            ..EpisodeOptions::default()
        }
    }

    #[test]
    fn zero_insulin_rises_monotonically_to_clamp() {
        let p = sample_patient(2, 0);
        let log = run_episode(&p, &mut ConstantRate(0.0), 1, &[], &quiet()).unwrap();
        assert_eq!(log.len(), 288);
        let g = log.cgm();
        assert!(g.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(*g.last().unwrap(), G_MAX);
    }

    #[test]
    fn unannounced_meals_are_hidden_but_act() {
        let p = sample_patient(2, 1);
        let meals = meal_schedule(&MealConfig::default(), 1, 1);
        let opts = EpisodeOptions {
            announce_meals: false,
            ..quiet()
        };
        let hidden = run_episode(&p, &mut ConstantRate(p.basal_need), 1, &meals, &opts).unwrap();
        assert!(hidden.records.iter().all(|r| r.carbs == 0.0 && !r.announced));
        assert!(hidden.meta.meals.iter().all(|m| !m.announced));
        let fasting = run_episode(&p, &mut ConstantRate(p.basal_need), 1, &[], &opts).unwrap();
        let max = |l: &EpisodeLog| l.cgm().into_iter().fold(0.0, f64::max);
        assert!(max(&hidden) > max(&fasting) + 50.0);
    }

    #[test]
    fn announced_meals_reach_the_controller() {
        let p = sample_patient(2, 1);
        let meals = meal_schedule(&MealConfig::default(), 1, 1);
        let log = run_episode(&p, &mut ConstantRate(p.basal_need), 1, &meals, &quiet()).unwrap();
        let announced: f64 = log.records.iter().map(|r| r.carbs).sum();
        let total: f64 = meals.iter().map(|m| m.carbs).sum();
        assert_eq!(announced, total);
    }

    #[test]
    fn rollouts_are_reproducible() {
        let p = sample_patient(4, 2);
        let meals = meal_schedule(&MealConfig::default(), 9, 2);
        let opts = EpisodeOptions {
            seed: 3,
            ..EpisodeOptions::default()
        };
        let run = || {
            let mut c = BehaviorController::new(BehaviorConfig::default(), PatientProxy::from_params(&p), 5);
            run_episode(&p, &mut c, 2, &meals, &opts).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.to_csv_string().unwrap(), run().to_csv_string().unwrap());
    }

    #[test]
    fn out_of_range_actions_are_clamped_and_flagged() {
        let p = sample_patient(4, 2);
        let mut c = |_: &Observation<'_>| ControlAction {
            rate: 14.0,
            bolus: 40.0,
            ..ControlAction::default()
        };
        let log = run_episode(&p, &mut c, 1, &[], &quiet()).unwrap();
        assert!(log.records.iter().all(|r| r.insulin_rate == 10.0 && r.bolus == 25.0));
        assert!(log.flags.iter().all(|f| f.action_clamped && f.bolus_clamped));
    }

    #[test]
    fn open_loop_intervals_use_fallback_basal() {
        let p = sample_patient(4, 3);
        let opts = EpisodeOptions {
            open_loop: vec![(60, 120)],
            open_loop_basal: Some(0.7),
            ..quiet()
        };
        let log = run_episode(&p, &mut ConstantRate(2.0), 1, &[], &opts).unwrap();
        for (r, f) in log.records.iter().zip(&log.flags) {
            let open = (60..120).contains(&r.t_min);
            assert_eq!(f.closed_loop, !open);
            assert_eq!(r.insulin_rate, if open { 0.7 } else { 2.0 });
        }
    }

    #[test]
    fn safety_zeroes_insulin_on_risk() {
        let p = sample_patient(4, 4);
        let opts = EpisodeOptions {
            safety_on: true,
            ..EpisodeOptions::default()
        };
        let log = run_episode(&p, &mut ConstantRate(6.0), 1, &[], &opts).unwrap();
        let risky = log.flags.iter().filter(|f| f.hypo_risk).count();
        assert!(risky > 0);
        for (r, f) in log.records.iter().zip(&log.flags) {
            if f.hypo_risk {
                assert_eq!((r.insulin_rate, r.bolus), (0.0, 0.0));
            }
        }
    }
}
