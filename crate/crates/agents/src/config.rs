use std::fmt;
use std::str::FromStr;

use glyrl_core::RewardKind;
use serde::{Deserialize, Serialize};

use crate::{AgentError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Td3Bc,
    Bcq,
    Cql,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Td3Bc, Algorithm::Bcq, Algorithm::Cql];

    pub fn tag(self) -> &'static str {
        match self {
            Algorithm::Td3Bc => "td3bc",
            Algorithm::Bcq => "bcq",
            Algorithm::Cql => "cql",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Algorithm {
    type Err = AgentError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "td3bc" => Ok(Algorithm::Td3Bc),
            "bcq" => Ok(Algorithm::Bcq),
            "cql" => Ok(Algorithm::Cql),
            _ => Err(AgentError::InvalidConfig(format!(
                "unknown algorithm `{s}` (expected td3bc, bcq or cql)"
            ))),
        }
    }
}

/// Hyperparameters of one training run. Defaults follow the original
/// TD3-BC, BCQ and CQL papers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub algorithm: Algorithm,
    pub reward: RewardKind,
    pub gamma: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub tau: f64,
    pub hidden: Vec<usize>,
    /// TD3-BC trade-off; 0 gives pure behavioral cloning.
    pub alpha: f64,
    pub policy_delay: u64,
    /// Target-policy smoothing noise and its clip, in normalized action units.
    pub target_noise: f64,
    pub noise_clip: f64,
    pub vae_latent: usize,
    pub vae_hidden: Vec<usize>,
    /// Maximum BCQ perturbation as a fraction of the action range.
    pub phi: f64,
    pub n_candidates: usize,
    /// Weight of the min in BCQ's soft clipped double-Q.
    pub bcq_lambda: f64,
    pub cql_alpha: f64,
    /// Actions sampled per state for each of the uniform and policy proposals.
    pub cql_samples: usize,
    pub checkpoint_every: u64,
    pub divergence_limit: f64,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Td3Bc,
            reward: RewardKind::Zhu,
            gamma: 0.99,
            batch_size: 256,
            steps: 100_000,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            tau: 0.005,
            hidden: vec![256, 256],
            alpha: 2.5,
            policy_delay: 2,
            target_noise: 0.2,
            noise_clip: 0.5,
            vae_latent: 2,
            vae_hidden: vec![256, 256],
            phi: 0.05,
            n_candidates: 10,
            bcq_lambda: 0.75,
            cql_alpha: 5.0,
            cql_samples: 10,
            checkpoint_every: 5_000,
            divergence_limit: 1e6,
            seed: 0,
        }
    }
}

impl AgentConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AgentError::InvalidConfig(m));
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if self.batch_size == 0 || self.policy_delay == 0 || self.n_candidates == 0 || self.cql_samples == 0 {
            return bad("batch size, policy delay and sample counts must be positive".into());
        }
        if self.vae_latent == 0 || self.hidden.contains(&0) || self.vae_hidden.contains(&0) {
            return bad("layer and latent sizes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.tau) || !(0.0..=1.0).contains(&self.bcq_lambda) {
            return bad("tau and bcq_lambda must lie in [0, 1]".into());
        }
        for (name, v) in [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("alpha", self.alpha),
            ("target_noise", self.target_noise),
            ("noise_clip", self.noise_clip),
            ("phi", self.phi),
            ("cql_alpha", self.cql_alpha),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.divergence_limit > 0.0) {
            return bad("divergence_limit must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_tags() {
        for a in Algorithm::ALL {
            assert_eq!(a.tag().parse::<Algorithm>().unwrap(), a);
        }
        assert_eq!("TD3-BC".parse::<Algorithm>().unwrap(), Algorithm::Td3Bc);
        assert!("sac".parse::<Algorithm>().is_err());
    }

    #[test]
    fn validation() {
        assert!(AgentConfig::default().validate().is_ok());
        for cfg in [
            AgentConfig { gamma: 1.0, ..Default::default() },
            AgentConfig { batch_size: 0, ..Default::default() },
            AgentConfig { hidden: vec![0], ..Default::default() },
            AgentConfig { alpha: f64::NAN, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
