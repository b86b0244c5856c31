//! Transition tensors as the learners see them: normalized f32 states and
//! actions mapped affinely from `[0, 10]` U/h onto `[-1, 1]`.

use glyrl_core::{Dataset, Normalizer, RewardKind};

use crate::{AgentError, Result, MAX_RATE};

pub fn action_to_unit(rate: f64) -> f64 {
    rate / MAX_RATE * 2.0 - 1.0
}

pub fn action_from_unit(x: f64) -> f64 {
    ((x + 1.0) * 0.5 * MAX_RATE).clamp(0.0, MAX_RATE)
}

/// Raw transitions with explicit rewards. Built from a [`Dataset`] for a
/// given reward kind, or by hand for toy problems.
#[derive(Debug, Clone, PartialEq)]
pub struct Transitions {
    pub dim: usize,
    pub states: Vec<f64>,
    /// U/h in `[0, 10]`.
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    pub done: Vec<bool>,
    /// Identifies the data (and reward) the transitions came from.
    pub id: String,
}

impl Transitions {
    pub fn new(
        dim: usize,
        states: Vec<f64>,
        actions: Vec<f64>,
        rewards: Vec<f64>,
        next_states: Vec<f64>,
        done: Vec<bool>,
        id: impl Into<String>,
    ) -> Result<Self> {
        let n = actions.len();
        if dim == 0 || states.len() != n * dim || next_states.len() != n * dim || rewards.len() != n || done.len() != n {
            return Err(AgentError::Dimension(format!(
                "{n} actions with {} states, {} next states, {} rewards, {} done flags at dim {dim}",
                states.len(),
                next_states.len(),
                rewards.len(),
                done.len()
            )));
        }
        if let Some(a) = actions.iter().find(|a| !(0.0..=MAX_RATE).contains(*a)) {
            return Err(AgentError::InvalidConfig(format!("action {a} outside [0, {MAX_RATE}]")));
        }
        if states.iter().chain(&next_states).chain(&rewards).any(|x| !x.is_finite()) {
            return Err(AgentError::InvalidConfig("non-finite state or reward".into()));
        }
        Ok(Self {
            dim,
            states,
            actions,
            rewards,
            next_states,
            done,
            id: id.into(),
        })
    }

    pub fn from_dataset(ds: &Dataset, reward: RewardKind) -> Result<Self> {
        Self::new(
            ds.dim,
            ds.states.clone(),
            ds.actions.clone(),
            ds.rewards(reward),
            ds.next_states.clone(),
            ds.done.clone(),
            format!("{}:{}", ds.content_hash(), reward.tag()),
        )
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }
}

/// Normalized f32 copy of a transition set.
#[derive(Debug, Clone)]
pub(crate) struct Tensors {
    pub dim: usize,
    pub s: Vec<f32>,
    pub s2: Vec<f32>,
    pub a: Vec<f32>,
    pub r: Vec<f32>,
    pub not_done: Vec<f32>,
}

/// One sampled minibatch, row-major.
#[derive(Debug, Clone)]
pub(crate) struct Batch {
    pub n: usize,
    pub s: Vec<f32>,
    pub s2: Vec<f32>,
    pub a: Vec<f32>,
    pub r: Vec<f32>,
    pub not_done: Vec<f32>,
}

pub(crate) fn normalize_rows(rows: &[f64], dim: usize, norm: &Normalizer) -> Result<Vec<f32>> {
    if norm.dim() != dim {
        return Err(AgentError::Dimension(format!("normalizer has {} features, data {dim}", norm.dim())));
    }
    Ok(rows
        .chunks_exact(dim)
        .flat_map(|r| r.iter().enumerate().map(|(f, x)| norm.apply_one(f, *x) as f32))
        .collect())
}

impl Tensors {
    pub fn new(t: &Transitions, norm: &Normalizer) -> Result<Self> {
        Ok(Self {
            dim: t.dim,
            s: normalize_rows(&t.states, t.dim, norm)?,
            s2: normalize_rows(&t.next_states, t.dim, norm)?,
            a: t.actions.iter().map(|a| action_to_unit(*a) as f32).collect(),
            r: t.rewards.iter().map(|r| *r as f32).collect(),
            not_done: t.done.iter().map(|d| if *d { 0.0 } else { 1.0 }).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        let d = self.dim;
        let mut b = Batch {
            n: idx.len(),
            s: Vec::with_capacity(idx.len() * d),
            s2: Vec::with_capacity(idx.len() * d),
            a: Vec::with_capacity(idx.len()),
            r: Vec::with_capacity(idx.len()),
            not_done: Vec::with_capacity(idx.len()),
        };
        for &i in idx {
            b.s.extend_from_slice(&self.s[i * d..(i + 1) * d]);
            b.s2.extend_from_slice(&self.s2[i * d..(i + 1) * d]);
            b.a.push(self.a[i]);
            b.r.push(self.r[i]);
            b.not_done.push(self.not_done[i]);
        }
        b
    }
}

/// Row-wise concatenation of `n` states with one extra column per row.
pub(crate) fn concat(s: &[f32], extra: &[f32], dim: usize) -> Vec<f32> {
    let n = s.len() / dim;
    let k = if n == 0 { 0 } else { extra.len() / n };
    let mut out = Vec::with_capacity(s.len() + extra.len());
    for i in 0..n {
        out.extend_from_slice(&s[i * dim..(i + 1) * dim]);
        out.extend_from_slice(&extra[i * k..(i + 1) * k]);
    }
    out
}

/// Repeat each row of `s` `k` times.
pub(crate) fn repeat_rows(s: &[f32], dim: usize, k: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(s.len() * k);
    for row in s.chunks_exact(dim) {
        for _ in 0..k {
            out.extend_from_slice(row);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_mapping_roundtrip() {
        assert_eq!(action_to_unit(0.0), -1.0);
        assert_eq!(action_to_unit(10.0), 1.0);
        assert_eq!(action_from_unit(0.0), 5.0);
        assert_eq!(action_from_unit(-3.0), 0.0);
        assert_eq!(action_from_unit(2.0), 10.0);
        for r in [0.0, 0.3, 2.5, 7.0, 10.0] {
            assert!((action_from_unit(action_to_unit(r)) - r).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_layouts() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(concat(&s, &[9.0, 8.0], 2), vec![1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        assert_eq!(concat(&s, &[9.0, 8.0, 7.0, 6.0], 2), vec![1.0, 2.0, 9.0, 8.0, 3.0, 4.0, 7.0, 6.0]);
        assert_eq!(repeat_rows(&s, 2, 2), vec![1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
    }

    #[test]
    fn rejects_bad_transitions() {
        assert!(Transitions::new(1, vec![0.0], vec![11.0], vec![0.0], vec![0.0], vec![false], "x").is_err());
        assert!(Transitions::new(2, vec![0.0], vec![1.0], vec![0.0], vec![0.0], vec![false], "x").is_err());
        assert!(Transitions::new(1, vec![0.0], vec![1.0], vec![f64::NAN], vec![0.0], vec![false], "x").is_err());
    }
}
