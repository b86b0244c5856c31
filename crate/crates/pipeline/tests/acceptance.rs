//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 on any
//! failure. Criteria 5–7 and 10 share one generated cohort and population model.

use std::sync::OnceLock;
use std::time::Instant;

use glyrl_agents::{
    estimate_metric, fqe_train, train, AgentConfig, Algorithm, FqeConfig, Policy, PolicyArtifact, ToyMdp, TablePolicy,
    Transitions,
};
use glyrl_core::{compute_metrics, Dataset, EpisodeLog, FeatureConfig, Normalizer, RewardKind};
use glyrl_nn::gradcheck::{check, GradCheckConfig};
use glyrl_nn::{Activation, Mlp, MlpSpec};
use glyrl_pipeline::analysis::correlation_matrix;
use glyrl_pipeline::cohort::{behavior_logs, build_dataset, build_eval_dataset};
use glyrl_pipeline::config::METRIC_KINDS;
use glyrl_pipeline::evaluation::{fqe_estimates, BolusOverride, LoggedPolicy, ScaledPolicy};
use glyrl_pipeline::personalize::{personalize, AuditLog, PatientSegments, Phase, TEST_SEGMENT};
use glyrl_pipeline::rollout::{evaluate_cohort, evaluate_patient, mean_row, Candidate, MetricRow};
use glyrl_pipeline::{RunConfig, ScenarioConfig};
use glyrl_sim::controllers::hypo_risk;
use glyrl_sim::{meal_schedule, run_episode, sample_patient, BehaviorController, ControlAction, EpisodeOptions, MealConfig, Observation, PatientProxy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Fixture {
    cfg: RunConfig,
    data: Dataset,
    eval_data: Dataset,
    population: PolicyArtifact,
    behavior: Vec<MetricRow>,
}

static FIXTURE: OnceLock<Result<Fixture, String>> = OnceLock::new();

fn fixture() -> Result<&'static Fixture, String> {
    FIXTURE
        .get_or_init(|| {
            let cfg = RunConfig::default();
            let logs = behavior_logs(&cfg, &cfg.cohort).map_err(err)?;
            let data = build_dataset(&cfg, &cfg.cohort, &logs).map_err(err)?;
            let eval_data = build_eval_dataset(&cfg, &cfg.cohort, &logs).map_err(err)?;
            let population = train_on(&data, cfg.agent.clone())?;
            let behavior = evaluate_cohort(&cfg, &cfg.cohort, Candidate::Behavior, &cfg.scenario).map_err(err)?.rows;
            Ok(Fixture {
                cfg,
                data,
                eval_data,
                population,
                behavior,
            })
        })
        .as_ref()
        .map_err(Clone::clone)
}

fn train_on(data: &Dataset, agent: AgentConfig) -> Result<PolicyArtifact, String> {
    let t = Transitions::from_dataset(data, agent.reward).map_err(err)?;
    let norm = Normalizer::fit_states(&data.states, &data.config.features, data.content_hash()).map_err(err)?;
    Ok(train(&t, agent, norm, Some(data.config.features), &mut |_| Ok(())).map_err(err)?.artifact)
}

fn rollout_rows(f: &Fixture, p: &dyn Policy) -> Result<Vec<MetricRow>, String> {
    let c = Candidate::Learned {
        policy: p,
        features: f.data.config.features,
    };
    Ok(evaluate_cohort(&f.cfg, &f.cfg.cohort, c, &f.cfg.scenario).map_err(err)?.rows)
}

// 1 ------------------------------------------------------------------------

fn c1_gradients() -> Verdict {
    let start = Instant::now();
    let dim = FeatureConfig::default().state_dim();
    let mut nets: Vec<(String, Mlp<f64>)> = Vec::new();
    for hidden in [vec![64, 64], vec![256, 256]] {
        for algorithm in Algorithm::ALL {
            let cfg = AgentConfig {
                algorithm,
                hidden: hidden.clone(),
                vae_hidden: hidden.clone(),
                ..AgentConfig::default()
            };
            let art = PolicyArtifact::init(cfg, Normalizer::identity(dim), None, "gradcheck".into()).map_err(err)?;
            let tag = format!("{algorithm}{hidden:?}");
            nets.push((format!("{tag} actor"), art.nets.actor.cast()));
            nets.push((format!("{tag} critic"), art.nets.critic1.cast()));
            if let (Some(e), Some(d)) = (&art.nets.vae_encoder, &art.nets.vae_decoder) {
                nets.push((format!("{tag} vae encoder"), e.cast()));
                nets.push((format!("{tag} vae decoder"), d.cast()));
            }
        }
        let fqe = MlpSpec::new([vec![dim + 1], hidden.clone(), vec![1]].concat(), Activation::Identity);
        nets.push((format!("fqe{hidden:?}"), Mlp::new(&fqe, 3).map_err(err)?));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst, mut worst_in, mut checked) = (0.0f64, 0.0f64, usize::MAX);
    let mut worst_net = String::new();
    for (name, net) in &nets {
        let r = check(net, GradCheckConfig { params: 1000, ..GradCheckConfig::default() }, &mut rng).map_err(err)?;
        if r.max_rel_error > worst {
            worst = r.max_rel_error;
            worst_net = name.clone();
        }
        worst_in = worst_in.max(r.max_input_rel_error);
        checked = checked.min(r.checked);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && worst_in < 1e-4 && checked >= 1000 && secs < 60.0;
    Ok((
        pass,
        format!(
            "{} networks, ≥{checked} parameters each; max rel. error {worst:.2e} ({worst_net}), inputs {worst_in:.2e}; {secs:.1}s",
            nets.len()
        ),
    ))
}

// 2 ------------------------------------------------------------------------

fn c2_fqe_oracle() -> Verdict {
    let start = Instant::now();
    let m = ToyMdp::default();
    let data = m.full_transitions(320).map_err(err)?;
    let cfg = FqeConfig {
        gamma: m.gamma,
        hidden: vec![32, 32],
        lr: 1e-3,
        batch_size: 1024,
        steps: 100_000,
        seed: 1,
        ..FqeConfig::default()
    };
    let mut max_err = 0.0f64;
    for pi in [[0, 1], [1, 0]] {
        let model = fqe_train(&data, &m.policy(pi), None, &cfg, None).map_err(err)?;
        let exact = m.exact_q(pi);
        for (s, row) in exact.iter().enumerate() {
            for (a, q_exact) in row.iter().enumerate() {
                let q = model.q_values(&[s as f64], &[m.actions[a]]).map_err(err)?[0];
                max_err = max_err.max((q - q_exact).abs());
            }
        }
    }
    // constant reward 0.6 on a done-free chain: the read-out must give 60.000
    let n = 2000;
    let s: Vec<f64> = (0..n).map(|i| (i % 10) as f64).collect();
    let s2: Vec<f64> = (0..n).map(|i| ((i + 1) % 10) as f64).collect();
    let a: Vec<f64> = (0..n).map(|i| (i % 7) as f64).collect();
    let chain = Transitions::new(1, s, a, vec![0.6; n], s2, vec![false; n], "chain").map_err(err)?;
    let pi = TablePolicy {
        actions: vec![3.0; 10],
        feature: 0,
        name: "three".into(),
    };
    let c = FqeConfig {
        gamma: 0.99,
        hidden: vec![32, 32],
        steps: 2000,
        ..FqeConfig::default()
    };
    let model = fqe_train(&chain, &pi, Some(RewardKind::TirIndicator), &c, None).map_err(err)?;
    let est = estimate_metric(&model, &chain.states, &pi).map_err(err)?.point;
    let secs = start.elapsed().as_secs_f64();
    let readout = format!("{est:.3}");
    let pass = data.len() >= 5000 && max_err < 1e-2 && readout == "60.000" && secs < 300.0;
    Ok((
        pass,
        format!(
            "{} transitions; max |Q − Q_exact| = {max_err:.4}; constant-reward read-out {readout} (expected 60.000); {secs:.1}s",
            data.len()
        ),
    ))
}

// 3 ------------------------------------------------------------------------

fn c3_metric_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut partition_fail, mut tbr54_fail) = (0usize, 0usize);
    let edges = [54.0, 70.0, 180.0];
    for _ in 0..100_000 {
        let len = rng.random_range(1..300);
        let series: Vec<f64> = (0..len)
            .map(|_| {
                if rng.random_bool(0.05) {
                    edges[rng.random_range(0..3)]
                } else {
                    rng.random_range(20.0..600.0)
                }
            })
            .collect();
        let m = compute_metrics(&series).map_err(err)?;
        partition_fail += usize::from(m.tir + m.tbr + m.tar != 100.0);
        tbr54_fail += usize::from(m.tbr54 > m.tbr);
    }
    let cv_ok = [40.0, 110.0, 123.456, 399.9]
        .iter()
        .all(|g| compute_metrics(&vec![*g; 97]).is_ok_and(|m| m.cv == 0.0));
    Ok((
        partition_fail == 0 && tbr54_fail == 0 && cv_ok,
        format!("10^5 series: partition failures {partition_fail}, TBR<54 > TBR {tbr54_fail}; constant-series CV 0: {cv_ok}"),
    ))
}

// 4 ------------------------------------------------------------------------

fn c4_safety() -> Verdict {
    let safety = EpisodeOptions::default().safety;
    let (mut risk_steps, mut violations) = (0usize, 0usize);
    let mut tbr = [[0.0f64; 2]; 2]; // [policy][safety on?]
    for seed in 0..50u64 {
        let p = sample_patient(4040, seed as u32);
        let meals = meal_schedule(&MealConfig::default(), seed, 2);
        for (k, safety_on) in [(0usize, false), (1, true)] {
            let opts = EpisodeOptions {
                safety_on,
                seed,
                ..EpisodeOptions::default()
            };
            // an erratic policy that doses large amounts regardless of glycemia
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut erratic = |o: &Observation<'_>| ControlAction {
                rate: rng.random_range(0.0..12.0),
                bolus: if o.announced_carbs > 0.0 { rng.random_range(0.0..25.0) } else { 0.0 },
                ..ControlAction::default()
            };
            let logs: [EpisodeLog; 2] = [
                run_episode(&p, &mut erratic, 2, &meals, &opts).map_err(err)?,
                run_episode(
                    &p,
                    &mut BehaviorController::new(Default::default(), PatientProxy::from_params(&p), seed),
                    2,
                    &meals,
                    &opts,
                )
                .map_err(err)?,
            ];
            for (j, log) in logs.iter().enumerate() {
                tbr[j][k] += compute_metrics(&log.cgm()).map_err(err)?.tbr;
                if !safety_on {
                    continue;
                }
                for (i, r) in log.records.iter().enumerate() {
                    let hist: Vec<f64> = log.records[(i + 1).saturating_sub(safety.regression_window)..=i].iter().map(|r| r.cgm).collect();
                    if hypo_risk(&hist, &safety) == Some(true) {
                        risk_steps += 1;
                        violations += usize::from(r.insulin_rate != 0.0 || r.bolus != 0.0);
                    }
                }
            }
        }
    }
    let tbr_ok = tbr.iter().all(|t| t[1] <= t[0]);
    Ok((
        risk_steps > 0 && violations == 0 && tbr_ok,
        format!(
            "100 rollouts with safety (50 seeds × erratic/behavior): {risk_steps} hypo-risk steps, {violations} with insulin; summed TBR erratic {:.1} → {:.1}, behavior {:.1} → {:.1} (off → on)",
            tbr[0][0], tbr[0][1], tbr[1][0], tbr[1][1]
        ),
    ))
}

// 5 ------------------------------------------------------------------------

fn c5_offline_improvement() -> Verdict {
    let f = fixture()?;
    let rl = rollout_rows(f, &f.population)?;
    let (mb, mr) = (mean_row(&f.behavior).ok_or("empty")?, mean_row(&rl).ok_or("empty")?);
    let better = f.behavior.iter().zip(&rl).filter(|(b, r)| r.tir >= b.tir).count();
    let per: Vec<String> = f.behavior.iter().zip(&rl).map(|(b, r)| format!("{:.1}/{:.1}", b.tir, r.tir)).collect();
    Ok((
        mr.tir >= mb.tir - 1.0 && better >= 3,
        format!(
            "{} patients × {} days; mean TIR behavior {:.2}, TD3-BC {:.2}; TD3-BC ≥ behavior on {better}/{} (behavior/TD3-BC: {})",
            f.cfg.cohort.n_patients,
            f.cfg.cohort.days,
            mb.tir,
            mr.tir,
            rl.len(),
            per.join(", ")
        ),
    ))
}

// 6 ------------------------------------------------------------------------

fn c6_fqe_calibration() -> Verdict {
    let f = fixture()?;
    let (train_parts, _) = f.data.chronological_split(&f.cfg.split).map_err(err)?;
    let first3 = Dataset::concat(&train_parts[..3]).map_err(err)?;
    let (eval_parts, _) = f.eval_data.chronological_split(&f.cfg.split).map_err(err)?;
    let test = &eval_parts[TEST_SEGMENT];
    let features = f.data.config.features;

    // behavior policy: FQE on its own logged actions vs simulated truth
    let fallback = PolicyArtifact::constant(glyrl_agents::MAX_RATE, f.population.normalizer.clone(), Some(features)).map_err(err)?;
    let logged = LoggedPolicy::new(test, &fallback);
    let est = fqe_estimates(&logged, test, test, &METRIC_KINDS, &f.cfg.fqe).map_err(err)?;
    let value = |k: RewardKind| est.iter().find(|(m, _)| m.kind == k).map(|(m, _)| m.record.estimate).unwrap_or(f64::NAN);
    let b_tir = value(RewardKind::TirIndicator);
    let truth = mean_row(&f.behavior).ok_or("empty")?.tir;
    let band_sum = value(RewardKind::TirIndicator) + value(RewardKind::TbrIndicator) + value(RewardKind::TarIndicator);
    println!("INFO 6: behavior FQE TIR+TBR+TAR = {band_sum:.2} (coherence 100 ± 5: {})", (band_sum - 100.0).abs() <= 5.0);

    // three policies with distinct true TIR
    let td3 = train_on(&first3, AgentConfig { alpha: 0.1, ..f.cfg.agent.clone() })?;
    let clone = train_on(&first3, AgentConfig { alpha: 0.0, ..f.cfg.agent.clone() })?;
    let c75 = ScaledPolicy { inner: &clone, factor: 0.75 };
    let c50 = ScaledPolicy { inner: &clone, factor: 0.5 };
    let candidates: [(&str, &dyn Policy); 3] = [("td3bc", &td3), ("0.75×bc", &c75), ("0.5×bc", &c50)];
    let mut rows = Vec::new();
    for (name, p) in candidates {
        let truth = mean_row(&rollout_rows(f, p)?).ok_or("empty")?.tir;
        let wrapped = BolusOverride::new(p, test);
        let e = fqe_estimates(&wrapped, test, test, &[RewardKind::TirIndicator], &f.cfg.fqe).map_err(err)?;
        rows.push((name, truth, e[0].0.record.estimate));
    }
    let mut gaps_ok = true;
    for i in 0..3 {
        for j in i + 1..3 {
            gaps_ok &= (rows[i].1 - rows[j].1).abs() >= 5.0;
        }
    }
    let order = |key: fn(&(&str, f64, f64)) -> f64| {
        let mut idx: Vec<usize> = (0..3).collect();
        idx.sort_by(|a, b| key(&rows[*b]).total_cmp(&key(&rows[*a])));
        idx
    };
    let ranking_ok = order(|r| r.1) == order(|r| r.2);
    let calib_ok = (b_tir - truth).abs() <= 10.0;
    let listing: Vec<String> = rows.iter().map(|(n, t, e)| format!("{n} true {t:.1} FQE {e:.1}")).collect();
    Ok((
        calib_ok && gaps_ok && ranking_ok,
        format!(
            "behavior TIR: FQE {b_tir:.2} vs simulated {truth:.2} (|Δ| {:.2} ≤ 10); ranking {} ({}; pairwise true gaps ≥ 5: {gaps_ok})",
            (b_tir - truth).abs(),
            if ranking_ok { "matches" } else { "differs" },
            listing.join(", ")
        ),
    ))
}

// 7 ------------------------------------------------------------------------

fn c7_personalization() -> Verdict {
    let f = fixture()?;
    let cfg = &f.cfg;
    let pc = &cfg.personalization.cohort;
    let logs = behavior_logs(cfg, pc).map_err(err)?;
    let train_ds = build_dataset(cfg, pc, &logs).map_err(err)?;
    let eval_ds = build_eval_dataset(cfg, pc, &logs).map_err(err)?;
    let segments = PatientSegments::split_cohort(&train_ds, &eval_ds, &cfg.split).map_err(err)?;

    let audit = AuditLog::new();
    let out = personalize(cfg, &f.population, &segments, &audit).map_err(err)?;
    let r = &out.report;
    let n = r.evaluated().count();
    let (matched, union) = r.improved();
    let hygiene = r.audit.iter().filter(|a| a.segment == TEST_SEGMENT).all(|a| a.phase == Phase::Reporting)
        && r.audit.iter().any(|a| a.segment == TEST_SEGMENT);

    // in-silico ground truth of the same comparison (training reward per step)
    let features = f.data.config.features;
    let mut truth_better = 0;
    for (id, model) in &out.models {
        let mean_reward = |p: &dyn Policy| -> Result<f64, String> {
            let log = evaluate_patient(cfg, pc, *id, Candidate::Learned { policy: p, features }, &cfg.scenario).map_err(err)?;
            let g = log.cgm();
            Ok(g.iter().map(|x| f.population.config.reward.eval(*x)).sum::<f64>() / g.len() as f64)
        };
        truth_better += usize::from(mean_reward(model)? > mean_reward(&f.population)?);
    }

    let mut null_cfg = cfg.clone();
    null_cfg.personalization.fine_tune_steps = 0;
    let null = personalize(&null_cfg, &f.population, &segments, &AuditLog::new()).map_err(err)?;
    let null_max = null.report.evaluated().map(|p| p.delta_matched().max_abs()).fold(0.0, f64::max);

    Ok((
        n == pc.n_patients as usize && matched >= 6 && null_max < 1.0 && hygiene,
        format!(
            "reward estimate improved on {matched}/{n} patients (patient-matched FQE; {union}/{n} against the union-trained population FQE); in-silico reward improved on {truth_better}/{n}; null control max |Δ| {null_max:.2e}; test segment read only at reporting: {hygiene}"
        ),
    ))
}

// 8 ------------------------------------------------------------------------

fn c8_correlations() -> Verdict {
    let cfg = RunConfig::default();
    let (days, table) = correlation_matrix(&cfg).map_err(err)?;
    let tir = table.get(RewardKind::TirIndicator, "tir").unwrap_or(f64::NAN);
    let tbr = table.get(RewardKind::TbrIndicator, "tbr").unwrap_or(f64::NAN);
    let full = table.rows.len() == RewardKind::ALL.len() && table.rows.iter().all(|r| r.corr.len() == 6);
    Ok((
        (tir - 1.0).abs() <= 1e-12 && (tbr - 1.0).abs() <= 1e-12 && full && days >= 200,
        format!("{days} patient-days; corr(tir_indicator, TIR) = {tir:.15}; corr(tbr_indicator, TBR) = {tbr:.15}; matrix {}×6", table.rows.len()),
    ))
}

// 9 ------------------------------------------------------------------------

fn c9_determinism() -> Verdict {
    let mut cfg = RunConfig::default();
    cfg.cohort.n_patients = 2;
    cfg.cohort.days = 6;
    let gen = |cfg: &RunConfig| -> Result<Vec<u8>, String> {
        let logs = behavior_logs(cfg, &cfg.cohort).map_err(err)?;
        build_dataset(cfg, &cfg.cohort, &logs).map_err(err)?.to_bytes().map_err(err)
    };
    let (a, b) = (gen(&cfg)?, gen(&cfg)?);
    let data_same = a == b;
    let ds = Dataset::from_bytes(&a).map_err(err)?;
    let data_roundtrip = ds.to_bytes().map_err(err)? == a;

    let mut checkpoints = Vec::new();
    for _ in 0..2 {
        let mut run = Vec::new();
        for algorithm in Algorithm::ALL {
            let agent = AgentConfig {
                algorithm,
                steps: 300,
                checkpoint_every: 100,
                batch_size: 64,
                ..cfg.agent.clone()
            };
            let t = Transitions::from_dataset(&ds, agent.reward).map_err(err)?;
            let norm = Normalizer::fit_states(&ds.states, &ds.config.features, ds.content_hash()).map_err(err)?;
            train(&t, agent, norm, Some(ds.config.features), &mut |art| {
                run.push(art.to_bytes()?);
                Ok(())
            })
            .map_err(err)?;
        }
        checkpoints.push(run);
    }
    let ckpt_same = checkpoints[0] == checkpoints[1];
    let dir = tempfile::tempdir().map_err(err)?;
    let mut art_roundtrip = true;
    for (k, bytes) in checkpoints[0].iter().enumerate() {
        let art = PolicyArtifact::from_bytes(bytes).map_err(err)?;
        let p = dir.path().join(format!("c{k}.bin"));
        art.save(&p).map_err(err)?;
        let back = PolicyArtifact::load(&p).map_err(err)?;
        art_roundtrip &= back == art && back.to_bytes().map_err(err)? == *bytes;
    }
    let ds_path = dir.path().join("d.bin");
    ds.save(&ds_path).map_err(err)?;
    let ds_file = Dataset::load(&ds_path).map_err(err)? == ds;
    let cfg_roundtrip = RunConfig::from_toml(&cfg.to_toml().map_err(err)?).map_err(err)? == cfg;
    let pass = data_same && data_roundtrip && ckpt_same && art_roundtrip && ds_file && cfg_roundtrip;
    Ok((
        pass,
        format!(
            "dataset bytes identical: {data_same}; {} checkpoints identical: {ckpt_same}; dataset round trip: {}; artifact round trips: {art_roundtrip}; config round trip: {cfg_roundtrip}",
            checkpoints[0].len(),
            data_roundtrip && ds_file
        ),
    ))
}

// 10 -----------------------------------------------------------------------

fn c10_unannounced() -> Verdict {
    let f = fixture()?;
    let scenario = ScenarioConfig {
        announce_meals: false,
        safety_on: true,
    };
    let features = f.data.config.features;
    let b = evaluate_cohort(&f.cfg, &f.cfg.cohort, Candidate::Behavior, &scenario).map_err(err)?;
    let c = Candidate::Learned {
        policy: &f.population,
        features,
    };
    let r = evaluate_cohort(&f.cfg, &f.cfg.cohort, c, &scenario).map_err(err)?;
    let builder = glyrl_core::features::StateBuilder::new(features).map_err(err)?;
    let mut cob_zero = true;
    let mut no_auto_bolus = true;
    for log in b.logs.iter().chain(&r.logs) {
        no_auto_bolus &= log.records.iter().all(|x| !x.announced) && log.records.iter().zip(&log.flags).all(|(x, fl)| x.bolus == 0.0 || fl.manual_bolus);
        for i in (features.first_step()..log.len()).step_by(7) {
            if let Some(s) = builder.state(log, i) {
                cob_zero &= s.to_vec()[features.cob_index()] == 0.0;
            }
        }
    }
    let (mb, mr) = (mean_row(&b.rows).ok_or("empty")?, mean_row(&r.rows).ok_or("empty")?);
    let announced = mean_row(&rollout_rows(f, &f.population)?).ok_or("empty")?;
    Ok((
        cob_zero && no_auto_bolus,
        format!(
            "COB ≡ 0: {cob_zero}; no automatic boluses: {no_auto_bolus}; mean glycemia behavior {:.1}, TD3-BC {:.1} mg/dL (Δ {:+.1}; directional RL ≤ behavior: {}); TIR behavior {:.2}, TD3-BC {:.2} (announced TD3-BC {:.2})",
            mb.mean_glycemia,
            mr.mean_glycemia,
            mr.mean_glycemia - mb.mean_glycemia,
            mr.mean_glycemia <= mb.mean_glycemia,
            mb.tir,
            mr.tir,
            announced.tir
        ),
    ))
}

fn main() {
    let criteria: [(u8, &str, fn() -> Verdict); 10] = [
        (1, "gradient correctness", c1_gradients),
        (2, "FQE oracle equivalence", c2_fqe_oracle),
        (3, "metric identities", c3_metric_identities),
        (4, "safety invariant", c4_safety),
        (5, "offline improvement", c5_offline_improvement),
        (6, "FQE calibration and ranking", c6_fqe_calibration),
        (7, "personalization protocol", c7_personalization),
        (8, "reward correlation identities", c8_correlations),
        (9, "determinism and round trips", c9_determinism),
        (10, "unannounced-meal scenario", c10_unannounced),
    ];
    let only: Vec<u8> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = match run() {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "{} {id:>2} {name}: {detail} [{:.0}s]",
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
