use std::path::Path;

use glyrl_core::{FeatureConfig, Normalizer};
use serde::{Deserialize, Serialize};

use crate::artifact::PolicyArtifact;
use crate::config::AgentConfig;
use crate::data::Transitions;
use crate::learner::Learner;
use crate::{AgentError, Result};

/// Loss-curve sampling interval, in gradient steps.
pub const CURVE_EVERY: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: u64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub aux_loss: f64,
    pub q_mean: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub artifact: PolicyArtifact,
    pub curve: Vec<CurveRow>,
    /// Step counts at which the hook received a checkpoint.
    pub checkpoints: Vec<u64>,
}

/// Train a fresh agent on `data` for `cfg.steps` gradient steps. The hook
/// receives the initial networks and then a checkpoint every
/// `cfg.checkpoint_every` steps and at the end.
pub fn train(
    data: &Transitions,
    cfg: AgentConfig,
    normalizer: Normalizer,
    features: Option<FeatureConfig>,
    hook: &mut dyn FnMut(&PolicyArtifact) -> Result<()>,
) -> Result<TrainOutcome> {
    let steps = cfg.steps;
    let mut learner = Learner::new(data, cfg, normalizer, features)?;
    run(&mut learner, steps, hook)
}

/// Advance `learner` by `steps` gradient steps with checkpointing.
pub fn run(learner: &mut Learner, steps: u64, hook: &mut dyn FnMut(&PolicyArtifact) -> Result<()>) -> Result<TrainOutcome> {
    let every = learner.cfg.checkpoint_every;
    let start = learner.steps();
    let mut curve = Vec::new();
    let mut checkpoints = vec![start];
    hook(learner.artifact())?;
    for k in 1..=steps {
        let l = learner.step()?;
        let done = learner.steps();
        if k % CURVE_EVERY == 0 || k == steps {
            curve.push(CurveRow {
                step: done,
                critic_loss: l.critic_loss,
                actor_loss: l.actor_loss,
                aux_loss: l.aux_loss,
                q_mean: l.q_mean,
            });
        }
        if (every > 0 && k % every == 0) || k == steps {
            hook(learner.artifact())?;
            checkpoints.push(done);
        }
    }
    Ok(TrainOutcome {
        artifact: learner.artifact().clone(),
        curve,
        checkpoints,
    })
}

pub fn write_curve(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| AgentError::Io {
        path: path.display().to_string(),
        source: e.into_error(),
    })?;
    Ok(glyrl_nn::container::write_atomic(path, &bytes)?)
}
