//! Serialized policies: networks, normalizer and training config in one
//! checksummed container.

use std::path::Path;

use glyrl_core::{FeatureConfig, Normalizer};
use glyrl_nn::{Activation, Container, Mlp, MlpSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{AgentConfig, Algorithm};
use crate::data::{action_from_unit, action_to_unit, concat, normalize_rows, repeat_rows};
use crate::{AgentError, Result};

pub const ARTIFACT_FORMAT: u32 = 1;

/// Anything that maps raw (unnormalized) states to insulin rates in U/h.
pub trait Policy: Sync {
    /// Stable identifier, used to tag evaluation records and break ties.
    fn id(&self) -> String;
    /// Row-major `states` of width `dim` to one rate per row.
    fn act_batch(&self, states: &[f64], dim: usize) -> Result<Vec<f64>>;
}

/// The networks of one agent. For BCQ `actor` is the perturbation model
/// ξ(s, a) and the VAE is present; otherwise `actor` is π(s).
#[derive(Debug, Clone, PartialEq)]
pub struct Nets {
    pub actor: Mlp,
    pub actor_target: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub critic1_target: Mlp,
    pub critic2_target: Mlp,
    pub vae_encoder: Option<Mlp>,
    pub vae_decoder: Option<Mlp>,
}

impl Nets {
    pub fn init(cfg: &AgentConfig, state_dim: usize) -> Result<Self> {
        let layers = |input: usize, hidden: &[usize], out: usize| {
            let mut v = vec![input];
            v.extend_from_slice(hidden);
            v.push(out);
            v
        };
        let actor_in = match cfg.algorithm {
            Algorithm::Bcq => state_dim + 1,
            _ => state_dim,
        };
        let seed = |k: u64| cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
        let actor: Mlp = Mlp::new(&MlpSpec::new(layers(actor_in, &cfg.hidden, 1), Activation::Tanh), seed(1))?;
        let critic_spec = MlpSpec::new(layers(state_dim + 1, &cfg.hidden, 1), Activation::Identity);
        let critic1: Mlp = Mlp::new(&critic_spec, seed(2))?;
        let critic2: Mlp = Mlp::new(&critic_spec, seed(3))?;
        let (vae_encoder, vae_decoder) = if cfg.algorithm == Algorithm::Bcq {
            let l = cfg.vae_latent;
            let enc = MlpSpec::new(layers(state_dim + 1, &cfg.vae_hidden, 2 * l), Activation::Identity);
            let dec = MlpSpec::new(layers(state_dim + l, &cfg.vae_hidden, 1), Activation::Tanh);
            (Some(Mlp::new(&enc, seed(4))?), Some(Mlp::new(&dec, seed(5))?))
        } else {
            (None, None)
        };
        Ok(Self {
            actor_target: actor.clone(),
            actor,
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            critic1,
            critic2,
            vae_encoder,
            vae_decoder,
        })
    }

    fn named(&self) -> Vec<(&'static str, &Mlp)> {
        let mut v = vec![
            ("actor", &self.actor),
            ("actor_target", &self.actor_target),
            ("critic1", &self.critic1),
            ("critic2", &self.critic2),
            ("critic1_target", &self.critic1_target),
            ("critic2_target", &self.critic2_target),
        ];
        if let (Some(e), Some(d)) = (&self.vae_encoder, &self.vae_decoder) {
            v.push(("vae_encoder", e));
            v.push(("vae_decoder", d));
        }
        v
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    config: AgentConfig,
    state_dim: usize,
    normalizer: Normalizer,
    features: Option<FeatureConfig>,
    steps: u64,
    data_id: String,
    constant_rate: Option<f64>,
    nets: Vec<(String, MlpSpec)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyArtifact {
    pub config: AgentConfig,
    pub state_dim: usize,
    pub normalizer: Normalizer,
    /// State layout the policy was trained on, when it came from episode logs.
    pub features: Option<FeatureConfig>,
    pub steps: u64,
    pub data_id: String,
    /// Fixed-rate policy; the networks are ignored when set.
    pub constant_rate: Option<f64>,
    pub nets: Nets,
}

impl PolicyArtifact {
    pub fn init(cfg: AgentConfig, normalizer: Normalizer, features: Option<FeatureConfig>, data_id: String) -> Result<Self> {
        cfg.validate()?;
        let state_dim = normalizer.dim();
        Ok(Self {
            nets: Nets::init(&cfg, state_dim)?,
            config: cfg,
            state_dim,
            normalizer,
            features,
            steps: 0,
            data_id,
            constant_rate: None,
        })
    }

    /// A policy that always delivers `rate` U/h (clamped to the action range).
    pub fn constant(rate: f64, normalizer: Normalizer, features: Option<FeatureConfig>) -> Result<Self> {
        if !rate.is_finite() {
            return Err(AgentError::InvalidConfig(format!("constant rate {rate}")));
        }
        let cfg = AgentConfig {
            hidden: vec![1],
            ..AgentConfig::default()
        };
        let mut a = Self::init(cfg, normalizer, features, "constant".into())?;
        a.constant_rate = Some(rate.clamp(0.0, crate::MAX_RATE));
        Ok(a)
    }

    pub fn algorithm(&self) -> Algorithm {
        self.config.algorithm
    }

    pub fn to_container(&self) -> Result<Container> {
        let named = self.nets.named();
        let m = Manifest {
            format: ARTIFACT_FORMAT,
            config: self.config.clone(),
            state_dim: self.state_dim,
            normalizer: self.normalizer.clone(),
            features: self.features,
            steps: self.steps,
            data_id: self.data_id.clone(),
            constant_rate: self.constant_rate,
            nets: named.iter().map(|(n, net)| (n.to_string(), net.spec())).collect(),
        };
        let mut c = Container::new(serde_json::to_string(&m)?);
        for (name, net) in named {
            for r in net.to_records(name) {
                c.push(r);
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&c.manifest)?;
        if m.format != ARTIFACT_FORMAT {
            return Err(AgentError::Format(format!(
                "artifact format {} (expected {ARTIFACT_FORMAT})",
                m.format
            )));
        }
        let net = |name: &str| -> Result<Option<Mlp>> {
            match m.nets.iter().find(|(n, _)| n == name) {
                Some((_, spec)) => Ok(Some(Mlp::from_records(name, spec, c)?)),
                None => Ok(None),
            }
        };
        let req = |name: &str| -> Result<Mlp> {
            net(name)?.ok_or_else(|| AgentError::Format(format!("artifact lacks network `{name}`")))
        };
        let nets = Nets {
            actor: req("actor")?,
            actor_target: req("actor_target")?,
            critic1: req("critic1")?,
            critic2: req("critic2")?,
            critic1_target: req("critic1_target")?,
            critic2_target: req("critic2_target")?,
            vae_encoder: net("vae_encoder")?,
            vae_decoder: net("vae_decoder")?,
        };
        if m.config.algorithm == Algorithm::Bcq && (nets.vae_encoder.is_none() || nets.vae_decoder.is_none()) {
            return Err(AgentError::Format("BCQ artifact without VAE".into()));
        }
        if m.normalizer.dim() != m.state_dim {
            return Err(AgentError::Format("normalizer and state dimension disagree".into()));
        }
        Ok(Self {
            config: m.config,
            state_dim: m.state_dim,
            normalizer: m.normalizer,
            features: m.features,
            steps: m.steps,
            data_id: m.data_id,
            constant_rate: m.constant_rate,
            nets,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_container()?.to_bytes()?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_container()?.write_atomic(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    /// First 8 bytes of the SHA-256 of the serialized artifact, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
    }

    /// Deterministic evaluation-mode action for one raw state, U/h in `[0, 10]`.
    pub fn act(&self, state: &[f64]) -> Result<f64> {
        Ok(self.act_batch(state, state.len())?[0])
    }

    /// Actions in normalized units for already-normalized f32 states.
    pub(crate) fn act_unit(&self, s: &[f32], n: usize) -> Result<Vec<f32>> {
        if let Some(r) = self.constant_rate {
            return Ok(vec![action_to_unit(r) as f32; n]);
        }
        match self.config.algorithm {
            Algorithm::Td3Bc | Algorithm::Cql => Ok(self.nets.actor.forward_batch(s, n)?.into_output()),
            Algorithm::Bcq => {
                let k = self.config.n_candidates;
                let latents = fixed_latents(self.config.seed, k, self.config.vae_latent);
                let mut z = Vec::with_capacity(n * latents.len());
                for _ in 0..n {
                    z.extend_from_slice(&latents);
                }
                let cand = bcq_candidates(
                    self.nets.vae_decoder.as_ref().expect("BCQ artifact has a decoder"),
                    &self.nets.actor,
                    &repeat_rows(s, self.state_dim, k),
                    self.state_dim,
                    &z,
                    bcq_scale(self.config.phi),
                )?;
                let q = self
                    .nets
                    .critic1
                    .forward_batch(&concat(&repeat_rows(s, self.state_dim, k), &cand, self.state_dim), n * k)?
                    .into_output();
                Ok((0..n)
                    .map(|i| cand[i * k + argmax_first(&q[i * k..(i + 1) * k])])
                    .collect())
            }
        }
    }
}

impl Policy for PolicyArtifact {
    fn id(&self) -> String {
        self.hash().unwrap_or_else(|_| "unhashable".into())
    }

    fn act_batch(&self, states: &[f64], dim: usize) -> Result<Vec<f64>> {
        if dim != self.state_dim || states.len() % dim != 0 {
            return Err(AgentError::Dimension(format!(
                "policy expects {}-dimensional states, got {} values at width {dim}",
                self.state_dim,
                states.len()
            )));
        }
        let n = states.len() / dim;
        if let Some(r) = self.constant_rate {
            return Ok(vec![r; n]);
        }
        let s = normalize_rows(states, dim, &self.normalizer)?;
        Ok(self.act_unit(&s, n)?.into_iter().map(|a| action_from_unit(a as f64)).collect())
    }
}

/// Perturbation bound in normalized action units: `phi` is a fraction of the
/// action range, which spans 2 units.
pub(crate) fn bcq_scale(phi: f64) -> f32 {
    (2.0 * phi) as f32
}

/// Index of the first maximum.
pub fn argmax_first(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Latent draws used by BCQ at evaluation time: standard normal clipped to
/// ±0.5, fixed by the seed so that `act` is deterministic.
pub(crate) fn fixed_latents(seed: u64, k: usize, latent: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0BC0_1A7E);
    (0..k * latent)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z.clamp(-0.5, 0.5) as f32
        })
        .collect()
}

/// Decode one candidate per row of `s`/`z` and apply the bounded perturbation.
pub(crate) fn bcq_candidates(decoder: &Mlp, perturb: &Mlp, s: &[f32], dim: usize, z: &[f32], scale: f32) -> Result<Vec<f32>> {
    let n = s.len() / dim;
    let a = decoder.forward_batch(&concat(s, z, dim), n)?.into_output();
    if scale == 0.0 {
        return Ok(a);
    }
    let p = perturb.forward_batch(&concat(s, &a, dim), n)?.into_output();
    Ok(a.iter().zip(&p).map(|(a, p)| (a + scale * p).clamp(-1.0, 1.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn artifact(alg: Algorithm) -> PolicyArtifact {
        let cfg = AgentConfig {
            algorithm: alg,
            hidden: vec![8, 8],
            vae_hidden: vec![8],
            seed: 3,
            ..AgentConfig::default()
        };
        PolicyArtifact::init(cfg, Normalizer::identity(4), None, "test".into()).unwrap()
    }

    #[test]
    fn zero_final_layer_gives_midpoint() {
        let mut a = artifact(Algorithm::Td3Bc);
        let last = a.nets.actor.layers_mut().last_mut().unwrap();
        last.weight.iter_mut().for_each(|w| *w = 0.0);
        last.bias.iter_mut().for_each(|b| *b = 0.0);
        assert_eq!(a.act(&[0.3, -1.0, 2.0, 5.0]).unwrap(), 5.0);
    }

    #[test]
    fn actions_in_range_for_all_algorithms() {
        for alg in Algorithm::ALL {
            let mut a = artifact(alg);
            // blow the weights up so the output saturates
            for l in a.nets.actor.layers_mut() {
                l.weight.iter_mut().for_each(|w| *w *= 100.0);
            }
            let states: Vec<f64> = (0..400).map(|i| ((i * 37 % 101) as f64 - 50.0) * 3.0).collect();
            for r in a.act_batch(&states, 4).unwrap() {
                assert!((0.0..=10.0).contains(&r), "{alg}: {r}");
            }
        }
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax_first(&[1.0, 5.0, 2.0]), 1);
        assert_eq!(argmax_first(&[3.0, 3.0]), 0);
    }

    #[test]
    fn constant_policy() {
        let a = PolicyArtifact::constant(0.0, Normalizer::identity(2), None).unwrap();
        assert_eq!(a.act_batch(&[1.0, 2.0, 3.0, 4.0], 2).unwrap(), vec![0.0, 0.0]);
        let b = PolicyArtifact::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(b.constant_rate, Some(0.0));
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        for alg in Algorithm::ALL {
            let a = artifact(alg);
            let bytes = a.to_bytes().unwrap();
            let b = PolicyArtifact::from_bytes(&bytes).unwrap();
            assert_eq!(a, b);
            assert_eq!(bytes, b.to_bytes().unwrap());
            assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        }
    }

    #[test]
    fn roundtrip_keeps_fitted_normalizer_exact() {
        use glyrl_core::features::FeatureScale;
        let mut a = artifact(Algorithm::Td3Bc);
        a.normalizer.scales[0] = FeatureScale::ZScore {
            mean: 143.38427159270823,
            sd: 0.1 + 0.2,
        };
        a.config.actor_lr = 3e-4 / 7.0;
        let bytes = a.to_bytes().unwrap();
        let b = PolicyArtifact::from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(bytes, b.to_bytes().unwrap());
    }

    #[test]
    fn rejects_wrong_dimension() {
        let a = artifact(Algorithm::Td3Bc);
        assert!(a.act(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn bcq_without_perturbation_returns_decode() {
        let a = artifact(Algorithm::Bcq);
        let dec = a.nets.vae_decoder.as_ref().unwrap();
        let s = [0.1f32, 0.2, 0.3, 0.4];
        let z = [0.25f32, -0.1];
        let cand = bcq_candidates(dec, &a.nets.actor, &s, 4, &z, 0.0).unwrap();
        let direct = dec.forward(&[0.1, 0.2, 0.3, 0.4, 0.25, -0.1]).unwrap();
        assert_eq!(cand, direct);
    }
}
