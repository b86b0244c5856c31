use glyrl_agents::fqe::estimate_from_q;
use glyrl_agents::{estimate_metric, fqe_train, rank_policies, EstimateRecord, FqeConfig, Policy, ToyMdp, Transitions};
use glyrl_core::RewardKind;

fn cfg(gamma: f64, steps: u64) -> FqeConfig {
    FqeConfig {
        gamma,
        hidden: vec![32, 32],
        lr: 1e-3,
        steps,
        seed: 1,
        ..FqeConfig::default()
    }
}

#[test]
fn myopic_limit_recovers_reward() {
    let m = ToyMdp::default();
    let train = m.full_transitions(100).unwrap();
    let held_out = m.full_transitions(5).unwrap();
    let pi = m.policy([1, 0]);
    let model = fqe_train(&train, &pi, None, &cfg(0.0, 3000), None).unwrap();
    let q = model.q_values(&held_out.states, &held_out.actions).unwrap();
    let mse = q.iter().zip(&held_out.rewards).map(|(q, r)| (q - r).powi(2)).sum::<f64>() / q.len() as f64;
    assert!(mse < 1e-3, "{mse}");
}

#[test]
fn toy_mdp_matches_linear_system() {
    let m = ToyMdp::default();
    let data = m.full_transitions(320).unwrap();
    assert!(data.len() >= 5000);
    for pi in [[0, 1], [1, 0]] {
        let c = FqeConfig { batch_size: 1024, ..cfg(m.gamma, 100_000) };
        let model = fqe_train(&data, &m.policy(pi), None, &c, None).unwrap();
        let exact = m.exact_q(pi);
        for s in 0..2 {
            for a in 0..2 {
                let q = model.q_values(&[s as f64], &[m.actions[a]]).unwrap()[0];
                assert!((q - exact[s][a]).abs() < 1e-2, "π {pi:?} Q({s},{a}) = {q} vs {}", exact[s][a]);
            }
        }
    }
}

/// Done-free chain with constant reward `c`.
fn constant_chain(c: f64, n: usize) -> Transitions {
    let s: Vec<f64> = (0..n).map(|i| (i % 10) as f64).collect();
    let s2: Vec<f64> = (0..n).map(|i| ((i + 1) % 10) as f64).collect();
    let a: Vec<f64> = (0..n).map(|i| (i % 7) as f64).collect();
    Transitions::new(1, s, a, vec![c; n], s2, vec![false; n], format!("chain-{c}")).unwrap()
}

#[test]
fn in_range_rollouts_estimate_full_tir() {
    let data = constant_chain(1.0, 2000);
    let pi = ToyMdp::default().policy([0, 1]);
    let pi = glyrl_agents::TablePolicy {
        actions: vec![pi.actions[0]; 10],
        ..pi
    };
    let model = fqe_train(&data, &pi, Some(RewardKind::TirIndicator), &cfg(0.99, 2000), None).unwrap();
    let q = model.q_values(&data.states[..50], &data.actions[..50]).unwrap();
    assert!(q.iter().all(|v| (v - 100.0).abs() < 0.5), "{:?}", &q[..5]);
    let est = estimate_metric(&model, &data.states, &pi).unwrap();
    assert!((est.point - 100.0).abs() < 0.5);
    assert_eq!(est.n_states, 2000);
}

#[test]
fn constant_reward_readout_identity() {
    for c in [0.25, 0.6] {
        let data = constant_chain(c, 2000);
        let pi = glyrl_agents::TablePolicy {
            actions: vec![3.0; 10],
            feature: 0,
            name: "three".into(),
        };
        let model = fqe_train(&data, &pi, Some(RewardKind::TirIndicator), &cfg(0.99, 2000), None).unwrap();
        let est = estimate_metric(&model, &data.states, &pi).unwrap();
        // starts at the fixed point and stays there to 3 decimals
        assert!((est.point - 100.0 * c).abs() < 5e-4, "{} vs {}", est.point, 100.0 * c);
    }
    let e = estimate_from_q(&[100.0; 4], 0.99, true).unwrap();
    assert!((e.point - 100.0).abs() < 1e-12);
}

#[test]
fn warm_start_continues_from_model() {
    let m = ToyMdp::default();
    let data = m.full_transitions(50).unwrap();
    let pi = m.policy([0, 0]);
    let first = fqe_train(&data, &pi, None, &cfg(m.gamma, 500), None).unwrap();
    let zero = fqe_train(&data, &pi, None, &FqeConfig { steps: 0, ..cfg(m.gamma, 0) }, Some(&first)).unwrap();
    assert_eq!(zero.q, first.q);
    assert_eq!(zero.steps, 500);
    let bad = FqeConfig {
        hidden: vec![8],
        ..cfg(m.gamma, 10)
    };
    assert!(fqe_train(&data, &pi, None, &bad, Some(&first)).is_err());
}

#[test]
fn fqe_is_deterministic() {
    let m = ToyMdp::default();
    let data = m.full_transitions(50).unwrap();
    let pi = m.policy([0, 1]);
    let a = fqe_train(&data, &pi, None, &cfg(m.gamma, 300), None).unwrap();
    let b = fqe_train(&data, &pi, None, &cfg(m.gamma, 300), None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ranking_orders_and_breaks_ties() {
    let m = ToyMdp::default();
    let data = m.full_transitions(100).unwrap();
    let good = m.policy([0, 0]);
    let bad = m.policy([1, 1]);
    let dup = m.policy([0, 0]);
    let cands: Vec<&dyn Policy> = vec![&bad, &good, &dup];
    let ranked = rank_policies(&cands, &data, &[0.0, 1.0], RewardKind::Zhu, &cfg(m.gamma, 4000)).unwrap();
    // rewards come from the dataset, the kind only labels the record
    assert_eq!(ranked[0].index, 1);
    assert_eq!(ranked[1].index, 2);
    assert_eq!(ranked[0].estimate, ranked[1].estimate);
    assert_eq!(ranked[2].index, 0);
    assert!(rank_policies(&cands[..1], &data, &[0.0], RewardKind::Zhu, &cfg(0.9, 1)).is_err());
}

#[test]
fn failing_candidate_is_unranked() {
    let m = ToyMdp::default();
    let data = m.full_transitions(20).unwrap();
    let good = m.policy([0, 0]);
    let broken = glyrl_agents::TablePolicy {
        actions: vec![1.0],
        feature: 0,
        name: "broken".into(),
    };
    let cands: Vec<&dyn Policy> = vec![&broken, &good];
    let ranked = rank_policies(&cands, &data, &[0.0, 1.0], RewardKind::Zhu, &cfg(0.9, 100)).unwrap();
    assert_eq!(ranked[0].index, 1);
    assert!(ranked[1].estimate.is_none() && ranked[1].error.is_some());
}

#[test]
fn estimate_records_serialize() {
    let m = ToyMdp::default();
    let data = m.full_transitions(10).unwrap();
    let pi = m.policy([0, 0]);
    let model = fqe_train(&data, &pi, Some(RewardKind::TbrIndicator), &cfg(0.9, 10), None).unwrap();
    let est = estimate_metric(&model, &[0.0, 1.0], &pi).unwrap();
    let rec = EstimateRecord::new(&model, &est, "toy");
    let json = serde_json::to_value(&rec).unwrap();
    for key in ["policy_hash", "metric", "estimate", "n_states", "dataset_id"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert_eq!(rec.metric, "tbr_indicator");
    assert!(estimate_metric(&model, &[], &pi).is_err());
}
