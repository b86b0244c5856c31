//! Fitted Q evaluation: regress Q(s, a) onto c(s, a) + γ·Q'(s', π(s')) over
//! logged transitions, with hard target copies.
//!
//! The network predicts `(1−γ)·Q`, which keeps regression targets on the
//! scale of one reward whatever γ; [`FqeModel::q_values`] undoes the scaling.

use glyrl_core::{Normalizer, RewardKind};
use glyrl_nn::{Activation, AdamConfig, AdamState, Mlp, MlpSpec};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::Policy;
use crate::data::{action_to_unit, concat, normalize_rows, Transitions};
use crate::{AgentError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FqeConfig {
    pub gamma: f64,
    pub hidden: Vec<usize>,
    pub lr: f64,
    /// The learning rate is constant for the first `decay_start` fraction of
    /// the steps, then decays linearly to `lr·final_lr_fraction`.
    pub decay_start: f64,
    pub final_lr_fraction: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Hard target-copy interval, in gradient steps.
    pub target_update: u64,
    pub divergence_limit: f64,
    pub seed: u64,
}

impl Default for FqeConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            hidden: vec![256, 256],
            lr: 3e-4,
            decay_start: 0.3,
            final_lr_fraction: 0.01,
            batch_size: 256,
            steps: 50_000,
            target_update: 200,
            divergence_limit: 1e6,
            seed: 0,
        }
    }
}

impl FqeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(AgentError::InvalidConfig(format!("FQE gamma {} outside [0, 1)", self.gamma)));
        }
        if self.batch_size == 0 || self.target_update == 0 || self.hidden.contains(&0) {
            return Err(AgentError::InvalidConfig("FQE sizes must be positive".into()));
        }
        if !(self.lr > 0.0
            && (0.0..=1.0).contains(&self.final_lr_fraction)
            && (0.0..=1.0).contains(&self.decay_start))
        {
            return Err(AgentError::InvalidConfig("FQE learning rate schedule".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FqeModel {
    pub q: Mlp,
    pub normalizer: Normalizer,
    /// `None` for transitions carrying custom rewards.
    pub reward: Option<RewardKind>,
    pub gamma: f64,
    pub policy_id: String,
    pub data_id: String,
    pub config: FqeConfig,
    pub steps: u64,
}

impl FqeModel {
    /// Q(s, a) in reward units for raw states and U/h actions.
    pub fn q_values(&self, states: &[f64], actions: &[f64]) -> Result<Vec<f64>> {
        let dim = self.normalizer.dim();
        if states.len() != actions.len() * dim {
            return Err(AgentError::Dimension(format!(
                "{} state values for {} actions at dim {dim}",
                states.len(),
                actions.len()
            )));
        }
        let s = normalize_rows(states, dim, &self.normalizer)?;
        let a: Vec<f32> = actions.iter().map(|a| action_to_unit(*a) as f32).collect();
        let scale = 1.0 / (1.0 - self.gamma);
        Ok(self
            .q
            .forward_batch(&concat(&s, &a, dim), actions.len())?
            .into_output()
            .into_iter()
            .map(|u| u as f64 * scale)
            .collect())
    }

    /// True when the read-out is a percentage of time (indicator rewards).
    pub fn is_metric(&self) -> bool {
        self.reward.is_some_and(RewardKind::is_indicator)
    }
}

/// Fit Q^π on `data` for `policy`. With `warm`, training starts from that
/// model's weights and normalizer.
pub fn fqe_train(
    data: &Transitions,
    policy: &dyn Policy,
    reward: Option<RewardKind>,
    cfg: &FqeConfig,
    warm: Option<&FqeModel>,
) -> Result<FqeModel> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(AgentError::InsufficientData("FQE on an empty dataset".into()));
    }
    let dim = data.dim;
    let n = data.len();
    let next_actions = policy.act_batch(&data.next_states, dim)?;

    let (mut q, normalizer) = match warm {
        Some(w) => {
            if w.normalizer.dim() != dim || (w.gamma - cfg.gamma).abs() > 0.0 || w.q.spec().layer_sizes[1..] != spec(dim, cfg).layer_sizes[1..] {
                return Err(AgentError::InvalidConfig("warm-start model does not match FQE config".into()));
            }
            (w.q.clone(), w.normalizer.clone())
        }
        None => {
            let norm = Normalizer::fit(&data.states, dim, &[], data.id.clone())?;
            let mut q: Mlp = Mlp::new(&spec(dim, cfg), cfg.seed.wrapping_add(0xF0E))?;
            // start exactly at the value of a policy earning the average reward forever
            let r_mean = data.rewards.iter().sum::<f64>() / n as f64;
            let last = q.layers_mut().last_mut().expect("non-empty network");
            last.weight.iter_mut().for_each(|w| *w = 0.0);
            last.bias.iter_mut().for_each(|b| *b = r_mean as f32);
            (q, norm)
        }
    };

    let s = normalize_rows(&data.states, dim, &normalizer)?;
    let s2 = normalize_rows(&data.next_states, dim, &normalizer)?;
    let a: Vec<f32> = data.actions.iter().map(|a| action_to_unit(*a) as f32).collect();
    let a2: Vec<f32> = next_actions.iter().map(|a| action_to_unit(*a) as f32).collect();
    let x = concat(&s, &a, dim);
    let x2 = concat(&s2, &a2, dim);
    let g = cfg.gamma as f32;
    let r_scaled: Vec<f32> = data.rewards.iter().map(|r| ((1.0 - cfg.gamma) * r) as f32).collect();
    let not_done: Vec<f32> = data.done.iter().map(|d| if *d { 0.0 } else { 1.0 }).collect();

    let mut opt = AdamState::new(&q, AdamConfig::with_lr(cfg.lr));
    let mut target = q.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00F9_E5EE);
    let b = cfg.batch_size;
    let w = dim + 1;
    // Minibatches walk a reshuffled permutation: every transition is visited
    // once per epoch, so sampling noise cancels over an epoch.
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut xb = vec![0.0f32; b * w];
    let mut x2b = vec![0.0f32; b * w];
    for step in 0..cfg.steps {
        if step % cfg.target_update == 0 {
            target = q.clone();
        }
        let frac = step as f64 / cfg.steps.max(1) as f64;
        let decay = ((frac - cfg.decay_start) / (1.0 - cfg.decay_start).max(1e-12)).clamp(0.0, 1.0);
        opt.set_learning_rate(cfg.lr * (1.0 - (1.0 - cfg.final_lr_fraction) * decay));
        let idx: Vec<usize> = (0..b)
            .map(|_| {
                if cursor == n {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                cursor += 1;
                order[cursor - 1]
            })
            .collect();
        for (k, &i) in idx.iter().enumerate() {
            xb[k * w..(k + 1) * w].copy_from_slice(&x[i * w..(i + 1) * w]);
            x2b[k * w..(k + 1) * w].copy_from_slice(&x2[i * w..(i + 1) * w]);
        }
        let next = target.forward_batch(&x2b, b)?.into_output();
        let tape = q.forward_batch(&xb, b)?;
        let out = tape.output();
        let mut grad = vec![0.0f32; b];
        let mut abs = 0.0f64;
        for (k, &i) in idx.iter().enumerate() {
            let y = r_scaled[i] + g * not_done[i] * next[k];
            grad[k] = 2.0 * (out[k] - y) / b as f32;
            abs += out[k].abs() as f64;
        }
        let q_mean = abs / b as f64 / (1.0 - cfg.gamma);
        if !q_mean.is_finite() {
            return Err(AgentError::NonFinite { what: "FQE Q", step });
        }
        if q_mean > cfg.divergence_limit {
            return Err(AgentError::Diverged { step, q_mean });
        }
        let grads = q.backward_batch(&tape, &grad)?.grads;
        opt.step(&mut q, &grads)?;
    }
    Ok(FqeModel {
        q,
        normalizer,
        reward,
        gamma: cfg.gamma,
        policy_id: policy.id(),
        data_id: data.id.clone(),
        config: cfg.clone(),
        steps: warm.map_or(0, |w| w.steps) + cfg.steps,
    })
}

fn spec(dim: usize, cfg: &FqeConfig) -> MlpSpec {
    let mut sizes = vec![dim + 1];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(1);
    MlpSpec::new(sizes, Activation::Identity)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    /// `(1−γ)·mean Q`, in percent for indicator rewards.
    pub point: f64,
    /// The same read-out per evaluation state.
    pub per_state: Vec<f64>,
    pub n_states: usize,
}

/// The `(1−γ)·mean Q` read-out of per-state Q values.
pub fn estimate_from_q(q: &[f64], gamma: f64, percent: bool) -> Result<Estimate> {
    if q.is_empty() {
        return Err(AgentError::InsufficientData("empty evaluation set".into()));
    }
    let k = (1.0 - gamma) * if percent { 100.0 } else { 1.0 };
    let per_state: Vec<f64> = q.iter().map(|v| v * k).collect();
    Ok(Estimate {
        point: per_state.iter().sum::<f64>() / q.len() as f64,
        n_states: q.len(),
        per_state,
    })
}

/// Estimate of the policy's metric (indicator rewards, percent) or average
/// reward (other kinds) over the raw evaluation `states`.
pub fn estimate_metric(model: &FqeModel, states: &[f64], policy: &dyn Policy) -> Result<Estimate> {
    let dim = model.normalizer.dim();
    if states.is_empty() {
        return Err(AgentError::InsufficientData("empty evaluation set".into()));
    }
    let actions = policy.act_batch(states, dim)?;
    estimate_from_q(&model.q_values(states, &actions)?, model.gamma, model.is_metric())
}

/// Machine-readable estimate, one per (policy, metric, evaluation set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub policy_hash: String,
    pub metric: String,
    pub estimate: f64,
    pub n_states: usize,
    pub dataset_id: String,
}

impl EstimateRecord {
    pub fn new(model: &FqeModel, est: &Estimate, dataset_id: impl Into<String>) -> Self {
        Self {
            policy_hash: model.policy_id.clone(),
            metric: model.reward.map_or("custom", RewardKind::tag).to_string(),
            estimate: est.point,
            n_states: est.n_states,
            dataset_id: dataset_id.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPolicy {
    /// Position of the policy in the candidate list.
    pub index: usize,
    pub policy_id: String,
    pub estimate: Option<f64>,
    pub error: Option<String>,
}

/// One FQE per candidate on the same data, ranked by estimate (descending,
/// ties by policy id). Candidates whose evaluation fails come last, unranked.
pub fn rank_policies(
    candidates: &[&dyn Policy],
    data: &Transitions,
    eval_states: &[f64],
    reward: RewardKind,
    cfg: &FqeConfig,
) -> Result<Vec<RankedPolicy>> {
    if candidates.len() < 2 {
        return Err(AgentError::InvalidConfig("ranking needs at least two candidates".into()));
    }
    let mut out: Vec<RankedPolicy> = candidates
        .par_iter()
        .enumerate()
        .map(|(index, p)| {
            let r = fqe_train(data, *p, Some(reward), cfg, None).and_then(|m| estimate_metric(&m, eval_states, *p));
            match r {
                Ok(e) => RankedPolicy {
                    index,
                    policy_id: p.id(),
                    estimate: Some(e.point),
                    error: None,
                },
                Err(e) => RankedPolicy {
                    index,
                    policy_id: p.id(),
                    estimate: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    out.sort_by(|a, b| match (a.estimate, b.estimate) {
        (Some(x), Some(y)) => y.total_cmp(&x).then_with(|| a.policy_id.cmp(&b.policy_id)).then(a.index.cmp(&b.index)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.index.cmp(&b.index),
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn readout_identities() {
        let e = estimate_from_q(&[100.0; 7], 0.99, true).unwrap();
        assert!((e.point - 100.0).abs() < 1e-9);
        assert_eq!(estimate_from_q(&[0.0; 3], 0.99, true).unwrap().point, 0.0);
        let raw = estimate_from_q(&[50.0, 150.0], 0.99, false).unwrap();
        assert!((raw.point - 1.0).abs() < 1e-12);
        assert!(estimate_from_q(&[], 0.99, true).is_err());
    }
}
