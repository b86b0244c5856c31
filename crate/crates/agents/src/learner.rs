//! Gradient updates of the three offline learners, sharing a twin-critic,
//! target-network skeleton.

use glyrl_core::{FeatureConfig, Normalizer};
use glyrl_nn::{polyak_update, AdamConfig, AdamState, Gradients};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::artifact::{bcq_candidates, bcq_scale, PolicyArtifact};
use crate::config::{AgentConfig, Algorithm};
use crate::data::{concat, repeat_rows, Batch, Tensors, Transitions};
use crate::{AgentError, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Losses {
    /// Total critic objective (TD plus any conservatism penalty), summed over both critics.
    pub critic_loss: f64,
    /// TD part of the critic objective.
    pub td_loss: f64,
    pub actor_loss: f64,
    /// BC term (TD3-BC), VAE loss (BCQ) or conservatism penalty (CQL).
    pub aux_loss: f64,
    /// Mean |Q1| on the data actions of the batch.
    pub q_mean: f64,
    /// CQL: mean Q1 on uniform actions minus mean Q1 on data actions.
    pub cql_gap: f64,
}

/// Critic targets of one batch, exposed for instrumentation.
#[derive(Debug, Clone)]
pub struct Targets {
    pub q1: Vec<f32>,
    pub q2: Vec<f32>,
    pub r: Vec<f32>,
    pub not_done: Vec<f32>,
    pub y: Vec<f32>,
}

/// `r + γ·(1−done)·min(q1, q2)`, elementwise.
pub fn td_target(r: &[f32], not_done: &[f32], q1: &[f32], q2: &[f32], gamma: f64) -> Vec<f32> {
    let g = gamma as f32;
    r.iter()
        .zip(not_done)
        .zip(q1.iter().zip(q2))
        .map(|((r, nd), (a, b))| r + g * nd * a.min(*b))
        .collect()
}

/// Importance-sampled logsumexp estimator of CQL: `logsumexp(q − log p) − ln N`.
pub fn cql_logsumexp(q: &[f32], log_p: &[f32]) -> (f64, Vec<f64>) {
    let v: Vec<f64> = q.iter().zip(log_p).map(|(q, lp)| *q as f64 - *lp as f64).collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let sum: f64 = e.iter().sum();
    let lse = m + sum.ln() - (v.len() as f64).ln();
    (lse, e.iter().map(|x| x / sum).collect())
}

/// TD3-BC's Q normalization `λ = α / mean|Q|`.
pub fn bc_lambda(alpha: f64, q: &[f32]) -> f64 {
    let m = q.iter().map(|x| x.abs() as f64).sum::<f64>() / q.len().max(1) as f64;
    alpha / m.max(1e-8)
}

fn mean(v: &[f32]) -> f64 {
    v.iter().map(|x| *x as f64).sum::<f64>() / v.len().max(1) as f64
}

fn mse_grad(q: &[f32], y: &[f32]) -> (f64, Vec<f32>) {
    let n = q.len() as f32;
    let loss = q.iter().zip(y).map(|(q, y)| ((q - y) as f64).powi(2)).sum::<f64>() / q.len() as f64;
    (loss, q.iter().zip(y).map(|(q, y)| 2.0 * (q - y) / n).collect())
}

/// The action column of a critic's input gradient.
fn action_grad(input_grad: &[f32], dim: usize) -> Vec<f32> {
    input_grad.chunks_exact(dim + 1).map(|r| r[dim]).collect()
}

pub struct Learner {
    pub cfg: AgentConfig,
    art: PolicyArtifact,
    actor_opt: AdamState,
    critic1_opt: AdamState,
    critic2_opt: AdamState,
    vae_opt: Option<(AdamState, AdamState)>,
    data: Tensors,
    rng: ChaCha8Rng,
    last: Losses,
}

impl Learner {
    /// Fresh networks for `data`, normalized by `normalizer`.
    pub fn new(data: &Transitions, cfg: AgentConfig, normalizer: Normalizer, features: Option<FeatureConfig>) -> Result<Self> {
        let art = PolicyArtifact::init(cfg, normalizer, features, data.id.clone())?;
        Self::from_artifact(art, data, None)
    }

    /// Continue training `art` on `data` with fresh optimizer state. `cfg`
    /// overrides the artifact's config (learning rates, steps, seed...), but
    /// not its architecture or normalizer.
    pub fn from_artifact(mut art: PolicyArtifact, data: &Transitions, cfg: Option<AgentConfig>) -> Result<Self> {
        if let Some(c) = cfg {
            c.validate()?;
            if c.algorithm != art.config.algorithm || c.hidden != art.config.hidden || c.vae_hidden != art.config.vae_hidden {
                return Err(AgentError::InvalidConfig(
                    "fine-tuning config must keep the artifact's algorithm and architecture".into(),
                ));
            }
            art.config = c;
        }
        if art.constant_rate.is_some() {
            return Err(AgentError::InvalidConfig("constant policies are not trainable".into()));
        }
        if data.dim != art.state_dim {
            return Err(AgentError::Dimension(format!(
                "data has {} features, policy {}",
                data.dim, art.state_dim
            )));
        }
        if data.len() < art.config.batch_size {
            return Err(AgentError::InsufficientData(format!(
                "{} transitions for batch size {}",
                data.len(),
                art.config.batch_size
            )));
        }
        let cfg = art.config.clone();
        let actor_opt = AdamState::new(&art.nets.actor, AdamConfig::with_lr(cfg.actor_lr));
        let critic1_opt = AdamState::new(&art.nets.critic1, AdamConfig::with_lr(cfg.critic_lr));
        let critic2_opt = AdamState::new(&art.nets.critic2, AdamConfig::with_lr(cfg.critic_lr));
        let vae_opt = match (&art.nets.vae_encoder, &art.nets.vae_decoder) {
            (Some(e), Some(d)) => Some((
                AdamState::new(e, AdamConfig::with_lr(cfg.actor_lr)),
                AdamState::new(d, AdamConfig::with_lr(cfg.actor_lr)),
            )),
            _ => None,
        };
        let tensors = Tensors::new(data, &art.normalizer)?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ art.steps.rotate_left(17)),
            cfg,
            art,
            actor_opt,
            critic1_opt,
            critic2_opt,
            vae_opt,
            data: tensors,
            last: Losses::default(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.art.steps
    }

    pub fn last_losses(&self) -> Losses {
        self.last
    }

    /// Snapshot of the current policy.
    pub fn artifact(&self) -> &PolicyArtifact {
        &self.art
    }

    pub fn into_artifact(self) -> PolicyArtifact {
        self.art
    }

    fn sample_indices(&mut self) -> Vec<usize> {
        let n = self.data.len();
        (0..self.cfg.batch_size).map(|_| self.rng.random_range(0..n)).collect()
    }

    fn normal(&mut self) -> f32 {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        z as f32
    }

    /// One gradient step of the configured algorithm.
    pub fn step(&mut self) -> Result<Losses> {
        let idx = self.sample_indices();
        let batch = self.data.batch(&idx);
        let losses = match self.cfg.algorithm {
            Algorithm::Td3Bc => self.td3bc_step(&batch)?,
            Algorithm::Bcq => self.bcq_step(&batch)?,
            Algorithm::Cql => self.cql_step(&batch)?,
        };
        self.art.steps += 1;
        if !(losses.q_mean.is_finite() && losses.critic_loss.is_finite() && losses.actor_loss.is_finite()) {
            return Err(AgentError::NonFinite {
                what: "loss",
                step: self.art.steps,
            });
        }
        if losses.q_mean > self.cfg.divergence_limit {
            return Err(AgentError::Diverged {
                step: self.art.steps,
                q_mean: losses.q_mean,
            });
        }
        self.last = losses;
        Ok(losses)
    }

    /// TD3 critic targets with target-policy smoothing for the given rows.
    pub fn targets_for(&mut self, idx: &[usize]) -> Result<Targets> {
        let batch = self.data.batch(idx);
        self.td3_targets(&batch)
    }

    fn td3_targets(&mut self, b: &Batch) -> Result<Targets> {
        let d = self.data.dim;
        let mut a2 = self.art.nets.actor_target.forward_batch(&b.s2, b.n)?.into_output();
        let (sigma, clip) = (self.cfg.target_noise as f32, self.cfg.noise_clip as f32);
        for a in a2.iter_mut() {
            let eps = (self.normal() * sigma).clamp(-clip, clip);
            *a = (*a + eps).clamp(-1.0, 1.0);
        }
        let x = concat(&b.s2, &a2, d);
        let q1 = self.art.nets.critic1_target.forward_batch(&x, b.n)?.into_output();
        let q2 = self.art.nets.critic2_target.forward_batch(&x, b.n)?.into_output();
        let y = td_target(&b.r, &b.not_done, &q1, &q2, self.cfg.gamma);
        Ok(Targets {
            q1,
            q2,
            r: b.r.clone(),
            not_done: b.not_done.clone(),
            y,
        })
    }

    /// TD regression of both critics onto `y`, plus an optional extra
    /// per-critic gradient contribution. Returns (TD loss, mean |Q1|).
    fn critic_update(&mut self, b: &Batch, y: &[f32], extra: Option<[Gradients<f32>; 2]>) -> Result<(f64, f64)> {
        let x = concat(&b.s, &b.a, self.data.dim);
        let mut td = 0.0;
        let mut q_abs = 0.0;
        let mut extra = extra.map(|[a, b]| [Some(a), Some(b)]).unwrap_or([None, None]);
        for k in 0..2 {
            let net = if k == 0 { &self.art.nets.critic1 } else { &self.art.nets.critic2 };
            let tape = net.forward_batch(&x, b.n)?;
            let (loss, g) = mse_grad(tape.output(), y);
            if k == 0 {
                q_abs = tape.output().iter().map(|q| q.abs() as f64).sum::<f64>() / b.n as f64;
            }
            td += loss;
            let mut grads = net.backward_batch(&tape, &g)?.grads;
            if let Some(e) = extra[k].take() {
                grads.add_assign(&e);
            }
            if k == 0 {
                self.critic1_opt.step(&mut self.art.nets.critic1, &grads)?;
            } else {
                self.critic2_opt.step(&mut self.art.nets.critic2, &grads)?;
            }
        }
        Ok((td, q_abs))
    }

    fn update_targets(&mut self, with_actor: bool) -> Result<()> {
        let tau = self.cfg.tau;
        let n = &mut self.art.nets;
        polyak_update(&mut n.critic1_target, &n.critic1, tau)?;
        polyak_update(&mut n.critic2_target, &n.critic2, tau)?;
        if with_actor {
            polyak_update(&mut n.actor_target, &n.actor, tau)?;
        }
        Ok(())
    }

    /// Deterministic-actor update on `−λ·Q1(s, π(s)) + bc·(π(s) − a)²`.
    /// Returns (actor loss, bc term).
    fn actor_update(&mut self, b: &Batch, alpha: Option<f64>) -> Result<(f64, f64)> {
        let d = self.data.dim;
        let tape_a = self.art.nets.actor.forward_batch(&b.s, b.n)?;
        let pi = tape_a.output().to_vec();
        let tape_q = self.art.nets.critic1.forward_batch(&concat(&b.s, &pi, d), b.n)?;
        let q = tape_q.output();
        // TD3-BC weights the Q term by λ and adds behavior cloning; plain TD3 uses λ = 1.
        let (lambda, bc_w) = match alpha {
            Some(a) => (bc_lambda(a, q), 1.0),
            None => (1.0, 0.0),
        };
        let n = b.n as f32;
        let bc = pi.iter().zip(&b.a).map(|(p, a)| ((p - a) as f64).powi(2)).sum::<f64>() / b.n as f64;
        let loss = -lambda * mean(q) + bc_w * bc;
        let dq = vec![(-lambda) as f32 / n; b.n];
        let back_q = self.art.nets.critic1.backward_batch(&tape_q, &dq)?;
        let g_pi: Vec<f32> = action_grad(&back_q.input_grad, d)
            .iter()
            .zip(pi.iter().zip(&b.a))
            .map(|(gq, (p, a))| gq + bc_w as f32 * 2.0 * (p - a) / n)
            .collect();
        let grads = self.art.nets.actor.backward_batch(&tape_a, &g_pi)?.grads;
        self.actor_opt.step(&mut self.art.nets.actor, &grads)?;
        Ok((loss, bc))
    }

    fn td3bc_step(&mut self, b: &Batch) -> Result<Losses> {
        let t = self.td3_targets(b)?;
        let (td, q_mean) = self.critic_update(b, &t.y, None)?;
        let mut out = Losses {
            critic_loss: td,
            td_loss: td,
            q_mean,
            actor_loss: self.last.actor_loss,
            aux_loss: self.last.aux_loss,
            ..Losses::default()
        };
        if (self.art.steps + 1) % self.cfg.policy_delay == 0 {
            let (loss, bc) = self.actor_update(b, Some(self.cfg.alpha))?;
            out.actor_loss = loss;
            out.aux_loss = bc;
            self.update_targets(true)?;
        }
        Ok(out)
    }

    fn cql_step(&mut self, b: &Batch) -> Result<Losses> {
        let d = self.data.dim;
        let t = self.td3_targets(b)?;
        let n = self.cfg.cql_samples;
        let m = 2 * n;
        // proposals: n uniform on [-1, 1] (density 1/2), n around the current policy
        let pi = self.art.nets.actor.forward_batch(&b.s, b.n)?.into_output();
        let sigma = self.cfg.target_noise.max(1e-3) as f32;
        let log_norm = -(sigma.ln() + 0.5 * (2.0 * std::f32::consts::PI).ln());
        let mut acts = Vec::with_capacity(b.n * m);
        let mut log_p = Vec::with_capacity(b.n * m);
        for p in pi.iter() {
            for _ in 0..n {
                acts.push(self.rng.random_range(-1.0f32..=1.0));
                log_p.push(-std::f32::consts::LN_2);
            }
            for _ in 0..n {
                let e = self.normal();
                acts.push((p + sigma * e).clamp(-1.0, 1.0));
                log_p.push(log_norm - 0.5 * e * e);
            }
        }
        let xs = concat(&repeat_rows(&b.s, d, m), &acts, d);
        let xd = concat(&b.s, &b.a, d);
        let alpha = self.cfg.cql_alpha;
        let mut penalty = 0.0;
        let mut gap = 0.0;
        let mut extra = Vec::with_capacity(2);
        for k in 0..2 {
            let net = if k == 0 { &self.art.nets.critic1 } else { &self.art.nets.critic2 };
            let tape_s = net.forward_batch(&xs, b.n * m)?;
            let qd = net.forward_batch(&xd, b.n)?;
            let qs = tape_s.output();
            let mut gs = vec![0.0f32; b.n * m];
            let mut pen = 0.0;
            for i in 0..b.n {
                let (lse, w) = cql_logsumexp(&qs[i * m..(i + 1) * m], &log_p[i * m..(i + 1) * m]);
                pen += lse - qd.output()[i] as f64;
                for (j, wj) in w.iter().enumerate() {
                    gs[i * m + j] = (alpha * wj / b.n as f64) as f32;
                }
            }
            pen /= b.n as f64;
            penalty += pen / 2.0;
            if k == 0 {
                let unif: f64 = (0..b.n)
                    .flat_map(|i| qs[i * m..i * m + n].iter())
                    .map(|q| *q as f64)
                    .sum::<f64>()
                    / (b.n * n) as f64;
                gap = unif - mean(qd.output());
            }
            let mut g = net.backward_batch(&tape_s, &gs)?.grads;
            let gd = net.backward_batch(&qd, &vec![(-alpha / b.n as f64) as f32; b.n])?.grads;
            g.add_assign(&gd);
            extra.push(g);
        }
        let e2 = extra.pop().expect("two critics");
        let e1 = extra.pop().expect("two critics");
        let (td, q_mean) = self.critic_update(b, &t.y, Some([e1, e2]))?;
        let mut out = Losses {
            critic_loss: td + alpha * 2.0 * penalty,
            td_loss: td,
            aux_loss: penalty,
            q_mean,
            cql_gap: gap,
            actor_loss: self.last.actor_loss,
        };
        if (self.art.steps + 1) % self.cfg.policy_delay == 0 {
            out.actor_loss = self.actor_update(b, None)?.0;
            self.update_targets(true)?;
        }
        Ok(out)
    }

    fn latents(&mut self, rows: usize) -> Vec<f32> {
        (0..rows * self.cfg.vae_latent).map(|_| self.normal().clamp(-0.5, 0.5)).collect()
    }

    /// VAE reconstruction + 0.5·KL step. Returns the loss.
    fn vae_update(&mut self, b: &Batch) -> Result<f64> {
        let d = self.data.dim;
        let l = self.cfg.vae_latent;
        let n = b.n as f32;
        let eps: Vec<f32> = (0..b.n * l).map(|_| self.normal()).collect();
        let (enc, dec) = match (&self.art.nets.vae_encoder, &self.art.nets.vae_decoder) {
            (Some(e), Some(d)) => (e, d),
            _ => return Err(AgentError::InvalidConfig("BCQ learner without VAE".into())),
        };
        let tape_e = enc.forward_batch(&concat(&b.s, &b.a, d), b.n)?;
        let out = tape_e.output();
        let mut mu = Vec::with_capacity(b.n * l);
        let mut ls = Vec::with_capacity(b.n * l);
        let mut clamped = Vec::with_capacity(b.n * l);
        for r in out.chunks_exact(2 * l) {
            mu.extend_from_slice(&r[..l]);
            for v in &r[l..] {
                ls.push(v.clamp(-4.0, 15.0));
                clamped.push(*v < -4.0 || *v > 15.0);
            }
        }
        let z: Vec<f32> = (0..b.n * l).map(|i| mu[i] + ls[i].exp() * eps[i]).collect();
        let tape_d = dec.forward_batch(&concat(&b.s, &z, d), b.n)?;
        let recon_a = tape_d.output();
        let recon = recon_a.iter().zip(&b.a).map(|(x, a)| ((x - a) as f64).powi(2)).sum::<f64>() / b.n as f64;
        let kl = (0..b.n * l)
            .map(|i| {
                let (m, s) = (mu[i] as f64, ls[i] as f64);
                -0.5 * (1.0 + 2.0 * s - m * m - (2.0 * s).exp())
            })
            .sum::<f64>()
            / b.n as f64;
        let g_dec: Vec<f32> = recon_a.iter().zip(&b.a).map(|(x, a)| 2.0 * (x - a) / n).collect();
        let back_d = dec.backward_batch(&tape_d, &g_dec)?;
        let mut g_enc = vec![0.0f32; b.n * 2 * l];
        for i in 0..b.n {
            for j in 0..l {
                let k = i * l + j;
                let dz = back_d.input_grad[i * (d + l) + d + j];
                let sd = ls[k].exp();
                g_enc[i * 2 * l + j] = dz + 0.5 * mu[k] / n;
                g_enc[i * 2 * l + l + j] = if clamped[k] {
                    0.0
                } else {
                    dz * sd * eps[k] + 0.5 * (sd * sd - 1.0) / n
                };
            }
        }
        let ge = enc.backward_batch(&tape_e, &g_enc)?.grads;
        let (eo, dopt) = self.vae_opt.as_mut().expect("BCQ learner has VAE optimizers");
        eo.step(self.art.nets.vae_encoder.as_mut().expect("encoder"), &ge)?;
        dopt.step(self.art.nets.vae_decoder.as_mut().expect("decoder"), &back_d.grads)?;
        Ok(recon + 0.5 * kl)
    }

    fn bcq_step(&mut self, b: &Batch) -> Result<Losses> {
        let d = self.data.dim;
        let vae = self.vae_update(b)?;
        let k = self.cfg.n_candidates;
        let scale = bcq_scale(self.cfg.phi);
        let lam = self.cfg.bcq_lambda as f32;

        // critic target from the best of k perturbed VAE candidates at s'
        let rep = repeat_rows(&b.s2, d, k);
        let z = self.latents(b.n * k);
        let nets = &self.art.nets;
        let decoder = nets.vae_decoder.as_ref().expect("decoder");
        let cand = bcq_candidates(decoder, &nets.actor_target, &rep, d, &z, scale)?;
        let x = concat(&rep, &cand, d);
        let q1 = nets.critic1_target.forward_batch(&x, b.n * k)?.into_output();
        let q2 = nets.critic2_target.forward_batch(&x, b.n * k)?.into_output();
        let soft: Vec<f32> = q1
            .iter()
            .zip(&q2)
            .map(|(a, b)| lam * a.min(*b) + (1.0 - lam) * a.max(*b))
            .collect();
        let g = self.cfg.gamma as f32;
        let y: Vec<f32> = (0..b.n)
            .map(|i| {
                let best = soft[i * k..(i + 1) * k].iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                b.r[i] + g * b.not_done[i] * best
            })
            .collect();
        let (td, q_mean) = self.critic_update(b, &y, None)?;

        // perturbation model: maximize Q1 on perturbed VAE samples
        let z = self.latents(b.n);
        let nets = &self.art.nets;
        let decoder = nets.vae_decoder.as_ref().expect("decoder");
        let a_c = decoder.forward_batch(&concat(&b.s, &z, d), b.n)?.into_output();
        let tape_p = nets.actor.forward_batch(&concat(&b.s, &a_c, d), b.n)?;
        let raw: Vec<f32> = a_c.iter().zip(tape_p.output()).map(|(a, p)| a + scale * p).collect();
        let a_p: Vec<f32> = raw.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        let tape_q = nets.critic1.forward_batch(&concat(&b.s, &a_p, d), b.n)?;
        let actor_loss = -mean(tape_q.output());
        let back_q = nets.critic1.backward_batch(&tape_q, &vec![-1.0 / b.n as f32; b.n])?;
        let g_p: Vec<f32> = action_grad(&back_q.input_grad, d)
            .iter()
            .zip(&raw)
            .map(|(gq, r)| if (-1.0..=1.0).contains(r) { gq * scale } else { 0.0 })
            .collect();
        let grads = nets.actor.backward_batch(&tape_p, &g_p)?.grads;
        self.actor_opt.step(&mut self.art.nets.actor, &grads)?;
        self.update_targets(true)?;
        Ok(Losses {
            critic_loss: td,
            td_loss: td,
            actor_loss,
            aux_loss: vae,
            q_mean,
            cql_gap: 0.0,
        })
    }

    /// Q1 of the current critic for normalized states and unit actions.
    pub(crate) fn critic_values(&self, s: &[f32], a: &[f32]) -> Result<Vec<f32>> {
        Ok(self
            .art
            .nets
            .critic1
            .forward_batch(&concat(s, a, self.data.dim), a.len())?
            .into_output())
    }

    /// Q1 at raw states and U/h actions.
    pub fn q_values(&self, states: &[f64], actions: &[f64]) -> Result<Vec<f64>> {
        let s = crate::data::normalize_rows(states, self.data.dim, &self.art.normalizer)?;
        let a: Vec<f32> = actions.iter().map(|a| crate::data::action_to_unit(*a) as f32).collect();
        Ok(self.critic_values(&s, &a)?.into_iter().map(f64::from).collect())
    }
}
