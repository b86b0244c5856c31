//! Post-hoc analyses: policy actions binned by the glycemia that followed
//! them, and the reward/metric correlation matrix.

use glyrl_agents::Policy;
use glyrl_core::episode::STEP_MINUTES;
use glyrl_core::reward::{reward_metric_correlation, CorrelationTable};
use glyrl_core::{Dataset, RewardKind};
use serde::{Deserialize, Serialize};

use crate::cohort::behavior_logs;
use crate::config::{CohortConfig, RunConfig};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Look-ahead for the "future glycemia" of a state, minutes.
    pub horizon_minutes: u32,
    pub bin_width: f64,
    pub range: [f64; 2],
    /// Bins with fewer samples are flagged sparse.
    pub min_bin_samples: usize,
    /// Corpus of the reward/metric correlation matrix.
    pub correlation_cohort: CohortConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            horizon_minutes: 30,
            bin_width: 25.0,
            range: [40.0, 400.0],
            min_bin_samples: 30,
            correlation_cohort: CohortConfig {
                n_patients: 10,
                first_index: 2000,
                days: 20,
                ..CohortConfig::default()
            },
        }
    }
}

impl AnalysisConfig {
    /// Bin edges from the lower range end in `bin_width` steps; the last bin
    /// is cut at the upper end.
    pub fn edges(&self) -> Vec<f64> {
        let [lo, hi] = self.range;
        let mut e = vec![lo];
        while *e.last().expect("non-empty") < hi {
            e.push((e.last().expect("non-empty") + self.bin_width).min(hi));
        }
        e
    }

    /// Bin of `g`; values outside the range fall in the edge bins.
    pub fn bin_of(&self, g: f64, edges: &[f64]) -> usize {
        let n = edges.len() - 1;
        edges[1..n].iter().take_while(|e| g >= **e).count()
    }
}

/// (state index, glycemia `steps` later) for every transition whose
/// trajectory is logged without a gap up to that point.
pub fn future_glycemia(data: &Dataset, steps: usize) -> Vec<(usize, f64)> {
    let k = steps.max(1) - 1;
    (0..data.len().saturating_sub(k))
        .filter(|i| {
            let j = i + k;
            data.patient[j] == data.patient[*i]
                && data.step[j] as usize == data.step[*i] as usize + k
                && !data.done[*i..j].iter().any(|d| *d)
        })
        .map(|i| (i, data.next_cgm(i + k)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    /// mean_b − mean_a.
    pub delta: f64,
    pub sparse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasalComparison {
    pub policy_a: String,
    pub policy_b: String,
    pub rows: Vec<BinRow>,
}

impl BasalComparison {
    /// Sample-weighted mean delta over non-sparse bins entirely above / below
    /// `threshold`.
    pub fn mean_delta_split(&self, threshold: f64) -> (Option<f64>, Option<f64>) {
        let avg = |f: &dyn Fn(&BinRow) -> bool| {
            let rows: Vec<&BinRow> = self.rows.iter().filter(|r| !r.sparse && f(r)).collect();
            let n: usize = rows.iter().map(|r| r.n).sum();
            (n > 0).then(|| rows.iter().map(|r| r.delta * r.n as f64).sum::<f64>() / n as f64)
        };
        (avg(&|r| r.hi <= threshold), avg(&|r| r.lo >= threshold))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lo,hi,n,mean_a,mean_b,delta,sparse\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{}\n",
                r.lo, r.hi, r.n, r.mean_a, r.mean_b, r.delta, r.sparse
            ));
        }
        out
    }
}

/// Accumulates (future glycemia, action a, action b) samples into bins.
pub struct BasalBins {
    cfg: AnalysisConfig,
    edges: Vec<f64>,
    n: Vec<usize>,
    sum_a: Vec<f64>,
    sum_b: Vec<f64>,
}

impl BasalBins {
    pub fn new(cfg: &AnalysisConfig) -> Self {
        let edges = cfg.edges();
        let k = edges.len() - 1;
        Self {
            cfg: cfg.clone(),
            edges,
            n: vec![0; k],
            sum_a: vec![0.0; k],
            sum_b: vec![0.0; k],
        }
    }

    pub fn add(&mut self, future: f64, a: f64, b: f64) {
        let k = self.cfg.bin_of(future, &self.edges);
        self.n[k] += 1;
        self.sum_a[k] += a;
        self.sum_b[k] += b;
    }

    /// Query both policies on every state of `data` with a known future glycemia.
    pub fn add_dataset(&mut self, data: &Dataset, a: &dyn Policy, b: &dyn Policy) -> Result<()> {
        let steps = (self.cfg.horizon_minutes / STEP_MINUTES) as usize;
        let fut = future_glycemia(data, steps);
        let states: Vec<f64> = fut.iter().flat_map(|(i, _)| data.state(*i).iter().copied()).collect();
        if states.is_empty() {
            return Ok(());
        }
        let xa = a.act_batch(&states, data.dim)?;
        let xb = b.act_batch(&states, data.dim)?;
        for ((_, g), (va, vb)) in fut.iter().zip(xa.iter().zip(&xb)) {
            self.add(*g, *va, *vb);
        }
        Ok(())
    }

    pub fn finish(self, policy_a: String, policy_b: String) -> BasalComparison {
        let rows = (0..self.n.len())
            .map(|k| {
                let n = self.n[k];
                let mean = |s: f64| if n > 0 { s / n as f64 } else { 0.0 };
                let (ma, mb) = (mean(self.sum_a[k]), mean(self.sum_b[k]));
                BinRow {
                    lo: self.edges[k],
                    hi: self.edges[k + 1],
                    n,
                    mean_a: ma,
                    mean_b: mb,
                    delta: mb - ma,
                    sparse: n < self.cfg.min_bin_samples,
                }
            })
            .collect();
        BasalComparison { policy_a, policy_b, rows }
    }
}

/// Daily glycemia series of the behavior policy on the correlation cohort,
/// and the reward/metric correlation matrix over them.
pub fn correlation_matrix(cfg: &RunConfig) -> Result<(usize, CorrelationTable)> {
    let cohort = &cfg.analysis.correlation_cohort;
    let logs = behavior_logs(cfg, cohort)?;
    let days: Vec<Vec<f64>> = logs.iter().flat_map(|l| l.cgm_by_day().into_iter().map(|(_, g)| g)).collect();
    let table = reward_metric_correlation(&days, &RewardKind::ALL)?;
    Ok((days.len(), table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn edges_cover_range_with_truncated_last_bin() {
        let e = AnalysisConfig::default().edges();
        assert_eq!(e.first(), Some(&40.0));
        assert_eq!(e.last(), Some(&400.0));
        assert_eq!(e.len(), 16);
        assert_eq!(e[e.len() - 2], 390.0);
    }

    #[test]
    fn out_of_range_values_fall_in_edge_bins() {
        let c = AnalysisConfig::default();
        let e = c.edges();
        assert_eq!(c.bin_of(10.0, &e), 0);
        assert_eq!(c.bin_of(40.0, &e), 0);
        assert_eq!(c.bin_of(65.0, &e), 1);
        assert_eq!(c.bin_of(399.0, &e), e.len() - 2);
        assert_eq!(c.bin_of(600.0, &e), e.len() - 2);
    }

    #[test]
    fn identical_actions_give_zero_delta_and_sparse_flags() {
        let c = AnalysisConfig::default();
        let mut b = BasalBins::new(&c);
        for k in 0..100 {
            b.add(100.0 + k as f64 * 0.1, 1.5, 1.5);
        }
        b.add(250.0, 0.0, 3.0);
        let cmp = b.finish("a".into(), "b".into());
        let dense: Vec<_> = cmp.rows.iter().filter(|r| !r.sparse).collect();
        assert_eq!(dense.len(), 1);
        assert_eq!(dense[0].delta, 0.0);
        assert_eq!(cmp.mean_delta_split(200.0), (Some(0.0), None));
        assert!(cmp.to_csv().starts_with("lo,hi,n"));
    }

    proptest! {
        #[test]
        fn every_value_lands_in_a_bin_containing_it_or_an_edge_bin(g in -100.0f64..800.0) {
            let c = AnalysisConfig::default();
            let e = c.edges();
            let k = c.bin_of(g, &e);
            prop_assert!(k < e.len() - 1);
            let inside = g >= e[k] && g < e[k + 1];
            prop_assert!(inside || (k == 0 && g < e[1]) || (k == e.len() - 2 && g >= e[k]));
        }
    }
}
