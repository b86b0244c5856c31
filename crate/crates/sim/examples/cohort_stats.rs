//! Behavior-policy statistics over a sampled cohort: `cargo run --release -p glyrl-sim --example cohort_stats [n] [days]`.

use glyrl_core::metrics::compute_metrics;
use glyrl_sim::glucosim::{meal_schedule, sample_patient, MealConfig};
use glyrl_sim::{run_episode, BehaviorConfig, BehaviorController, EpisodeOptions, PatientProxy};

fn main() {
    let mut args = std::env::args().skip(1);
    let n: u32 = args.next().and_then(|a| a.parse().ok()).unwrap_or(100);
    let days: u32 = args.next().and_then(|a| a.parse().ok()).unwrap_or(7);
    let cfg: BehaviorConfig = args.next().map(|a| serde_json::from_str(&a).unwrap()).unwrap_or_default();
    let no_meals = args.next().is_some();
    let (mut w, mut tdd, mut tir, mut tbr, mut tar, mut mean) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    for i in 0..n {
        let p = sample_patient(2024, i);
        let meals = if no_meals { vec![] } else { meal_schedule(&MealConfig::default(), p.seed, days) };
        let mut c = BehaviorController::new(cfg, PatientProxy::from_params(&p), p.seed);
        let opts = EpisodeOptions { seed: 1, ..EpisodeOptions::default() };
        let log = run_episode(&p, &mut c, days, &meals, &opts).unwrap();
        let m = compute_metrics(&log.cgm()).unwrap();
        let units: f64 = log.records.iter().map(|r| r.units()).sum::<f64>() / days as f64;
        w.push(p.weight);
        tdd.push(units);
        tir.push(m.tir);
        tbr.push(m.tbr);
        tar.push(m.tar);
        mean.push(m.mean_glycemia);
        if i < 10 {
            println!("p{i}: w {:.0} tdd_nom {:.1} tdd {:.1} tir {:.1} tbr {:.1} tar {:.1} mean {:.0}", p.weight, p.nominal_tdd, units, m.tir, m.tbr, m.tar, m.mean_glycemia);
        }
    }
    let stat = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        format!("{m:.1} ± {sd:.1}")
    };
    println!("weight {}  tdd {}  tir {}  tbr {}  tar {}  mean {}", stat(&w), stat(&tdd), stat(&tir), stat(&tbr), stat(&tar), stat(&mean));
}
