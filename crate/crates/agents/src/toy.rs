//! A 2-state, 2-action MDP with known dynamics, embedded as an offline
//! dataset, and its exact policy evaluation.

use crate::artifact::Policy;
use crate::data::Transitions;
use crate::{AgentError, Result};

/// Policy looking up its action from an integer-valued state feature.
#[derive(Debug, Clone, PartialEq)]
pub struct TablePolicy {
    /// U/h per state index.
    pub actions: Vec<f64>,
    pub feature: usize,
    pub name: String,
}

impl Policy for TablePolicy {
    fn id(&self) -> String {
        self.name.clone()
    }

    fn act_batch(&self, states: &[f64], dim: usize) -> Result<Vec<f64>> {
        if dim <= self.feature || states.len() % dim != 0 {
            return Err(AgentError::Dimension(format!("table policy reads feature {} of width {dim}", self.feature)));
        }
        states
            .chunks_exact(dim)
            .map(|s| {
                let k = s[self.feature].round();
                self.actions
                    .get(k as usize)
                    .copied()
                    .filter(|_| k >= 0.0)
                    .ok_or_else(|| AgentError::Dimension(format!("no table entry for state {k}")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyMdp {
    /// `p[s][a][s']`, each a multiple of 1/4 so that the dataset reproduces
    /// the dynamics exactly.
    pub p: [[[f64; 2]; 2]; 2],
    pub r: [[f64; 2]; 2],
    /// U/h of the two actions.
    pub actions: [f64; 2],
    pub gamma: f64,
}

impl Default for ToyMdp {
    fn default() -> Self {
        Self {
            p: [[[0.75, 0.25], [0.25, 0.75]], [[0.5, 0.5], [0.0, 1.0]]],
            r: [[1.0, 0.0], [0.5, -0.5]],
            actions: [2.5, 7.5],
            gamma: 0.9,
        }
    }
}

impl ToyMdp {
    /// Exact Q^π for the deterministic policy `pi[s]` (action indices), by
    /// solving the 2×2 system `(I − γ P_π) V = r_π`.
    pub fn exact_q(&self, pi: [usize; 2]) -> [[f64; 2]; 2] {
        let g = self.gamma;
        let pp = |s: usize, s2: usize| self.p[s][pi[s]][s2];
        let (a, b) = (1.0 - g * pp(0, 0), -g * pp(0, 1));
        let (c, d) = (-g * pp(1, 0), 1.0 - g * pp(1, 1));
        let (r0, r1) = (self.r[0][pi[0]], self.r[1][pi[1]]);
        let det = a * d - b * c;
        let v = [(d * r0 - b * r1) / det, (a * r1 - c * r0) / det];
        let mut q = [[0.0; 2]; 2];
        for (s, row) in q.iter_mut().enumerate() {
            for (act, qv) in row.iter_mut().enumerate() {
                *qv = self.r[s][act] + g * (self.p[s][act][0] * v[0] + self.p[s][act][1] * v[1]);
            }
        }
        q
    }

    /// `reps·4` transitions per (s, a) pair in `pairs`, with next-state
    /// counts exactly proportional to `p`. States are the single feature `s`.
    pub fn transitions(&self, pairs: &[(usize, usize)], reps: usize) -> Result<Transitions> {
        let (mut st, mut ac, mut rw, mut nx) = (vec![], vec![], vec![], vec![]);
        for _ in 0..reps {
            for &(s, a) in pairs {
                for (s2, p) in self.p[s][a].iter().enumerate() {
                    let k = (p * 4.0).round() as usize;
                    for _ in 0..k {
                        st.push(s as f64);
                        ac.push(self.actions[a]);
                        rw.push(self.r[s][a]);
                        nx.push(s2 as f64);
                    }
                }
            }
        }
        let n = ac.len();
        Transitions::new(1, st, ac, rw, nx, vec![false; n], "toy-mdp")
    }

    /// Every (s, a) pair covered.
    pub fn full_transitions(&self, reps: usize) -> Result<Transitions> {
        self.transitions(&[(0, 0), (0, 1), (1, 0), (1, 1)], reps)
    }

    pub fn policy(&self, pi: [usize; 2]) -> TablePolicy {
        TablePolicy {
            actions: vec![self.actions[pi[0]], self.actions[pi[1]]],
            feature: 0,
            name: format!("toy-{}{}", pi[0], pi[1]),
        }
    }
}
