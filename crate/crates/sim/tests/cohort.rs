//! Population statistics of the sampled cohort under the behavior policy.

use glyrl_sim::glucosim::{meal_schedule, sample_patient, MealConfig};
use glyrl_sim::{run_episode, BehaviorConfig, BehaviorController, EpisodeOptions, PatientProxy};

#[test]
fn weight_matches_population() {
    let mean = (0..100).map(|i| sample_patient(2024, i).weight).sum::<f64>() / 100.0;
    assert!((mean - 77.1).abs() <= 5.0, "mean weight {mean}");
}

#[test]
fn behavior_tdd_matches_population() {
    let days = 7;
    let mut total = 0.0;
    for i in 0..100 {
        let p = sample_patient(2024, i);
        let meals = meal_schedule(&MealConfig::default(), p.seed, days);
        let mut c = BehaviorController::new(BehaviorConfig::default(), PatientProxy::from_params(&p), p.seed);
        let log = run_episode(&p, &mut c, days, &meals, &EpisodeOptions::default()).unwrap();
        total += log.records.iter().map(|r| r.units()).sum::<f64>() / days as f64;
    }
    let mean = total / 100.0;
    assert!((mean - 44.0).abs() <= 10.0, "mean TDD {mean}");
}
