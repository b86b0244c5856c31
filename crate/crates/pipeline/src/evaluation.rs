//! FQE evaluation of policies on logged data, and policy wrappers used as
//! evaluation candidates.

use std::collections::{HashMap, HashSet};

use glyrl_agents::{estimate_metric, fqe_train, AgentError, EstimateRecord, FqeConfig, FqeModel, Policy, Transitions};
use glyrl_core::{Dataset, RewardKind};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::Result;

fn row_key(row: &[f64]) -> Vec<u64> {
    row.iter().map(|x| x.to_bits()).collect()
}

/// The behavior policy as recorded: the logged action of every dataset state.
/// States absent from the log (the successor of a step whose insulin left the
/// action range, typically a meal bolus) are answered by `fallback`.
pub struct LoggedPolicy<'a> {
    actions: HashMap<Vec<u64>, f64>,
    fallback: &'a dyn Policy,
    id: String,
}

impl<'a> LoggedPolicy<'a> {
    pub fn new(data: &Dataset, fallback: &'a dyn Policy) -> Self {
        let actions = (0..data.len()).map(|i| (row_key(data.state(i)), data.actions[i])).collect();
        Self {
            actions,
            fallback,
            id: format!("logged:{}", data.content_hash()),
        }
    }
}

impl Policy for LoggedPolicy<'_> {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn act_batch(&self, states: &[f64], dim: usize) -> glyrl_agents::Result<Vec<f64>> {
        if dim == 0 || states.len() % dim != 0 {
            return Err(AgentError::Dimension(format!("{} values for dimension {dim}", states.len())));
        }
        let mut out = vec![f64::NAN; states.len() / dim];
        let mut missing = Vec::new();
        for (k, row) in states.chunks(dim).enumerate() {
            match self.actions.get(&row_key(row)) {
                Some(a) => out[k] = *a,
                None => missing.push(k),
            }
        }
        if !missing.is_empty() {
            let rows: Vec<f64> = missing.iter().flat_map(|k| states[k * dim..(k + 1) * dim].iter().copied()).collect();
            for (k, a) in missing.iter().zip(self.fallback.act_batch(&rows, dim)?) {
                out[*k] = a;
            }
        }
        Ok(out)
    }
}

/// `factor ×` another policy's rate, clamped to the action range.
pub struct ScaledPolicy<'a> {
    pub inner: &'a dyn Policy,
    pub factor: f64,
}

impl Policy for ScaledPolicy<'_> {
    fn id(&self) -> String {
        format!("{}x{}", self.inner.id(), self.factor)
    }

    fn act_batch(&self, states: &[f64], dim: usize) -> glyrl_agents::Result<Vec<f64>> {
        Ok(self
            .inner
            .act_batch(states, dim)?
            .into_iter()
            .map(|a| (a * self.factor).clamp(0.0, glyrl_agents::MAX_RATE))
            .collect())
    }
}

/// One FQE read-out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEstimate {
    pub kind: RewardKind,
    pub record: EstimateRecord,
}

/// Train one FQE model per reward kind on `train` and read each out on the
/// states of `eval`. Kinds are processed in parallel.
pub fn fqe_estimates(
    policy: &dyn Policy,
    train: &Dataset,
    eval: &Dataset,
    kinds: &[RewardKind],
    cfg: &FqeConfig,
) -> Result<Vec<(MetricEstimate, FqeModel)>> {
    kinds
        .par_iter()
        .map(|kind| {
            let t = Transitions::from_dataset(train, *kind)?;
            let model = fqe_train(&t, policy, Some(*kind), cfg, None)?;
            let est = estimate_metric(&model, &eval.states, policy)?;
            let record = EstimateRecord::new(&model, &est, eval.content_hash());
            Ok((MetricEstimate { kind: *kind, record }, model))
        })
        .collect()
}

/// Read out an existing model on new states.
pub fn read_out(model: &FqeModel, policy: &dyn Policy, eval: &Dataset) -> Result<EstimateRecord> {
    let est = estimate_metric(model, &eval.states, policy)?;
    Ok(EstimateRecord::new(model, &est, eval.content_hash()))
}

/// A learned basal policy as deployed: at meal-bolus steps the calculator
/// overrides it. In a dataset built with clamped excess actions those steps
/// are the states whose successor's newest insulin slot exceeds the action
/// range; there the override is represented by the clamped maximum rate.
pub struct BolusOverride<'a> {
    pub inner: &'a dyn Policy,
    meal_states: HashSet<Vec<u64>>,
}

impl<'a> BolusOverride<'a> {
    pub fn new(inner: &'a dyn Policy, data: &Dataset) -> Self {
        let newest_insulin = data.config.features.iob_index() - 1;
        let meal_states = (0..data.len())
            .filter(|i| data.next_state(*i)[newest_insulin] > glyrl_agents::MAX_RATE)
            .map(|i| row_key(data.state(i)))
            .collect();
        Self { inner, meal_states }
    }

    pub fn n_meal_states(&self) -> usize {
        self.meal_states.len()
    }
}

impl Policy for BolusOverride<'_> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn act_batch(&self, states: &[f64], dim: usize) -> glyrl_agents::Result<Vec<f64>> {
        let mut out = self.inner.act_batch(states, dim)?;
        for (a, row) in out.iter_mut().zip(states.chunks(dim)) {
            if self.meal_states.contains(&row_key(row)) {
                *a = glyrl_agents::MAX_RATE;
            }
        }
        Ok(out)
    }
}
