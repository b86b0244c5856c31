//! Glycemia-only reward functions and the reward ↔ clinical-metric correlation table.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::metrics::{compute_metrics, ClinicalMetrics, HYPER, HYPO};
use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Binary,
    Zhu,
    Magni,
    Triangle,
    TirIndicator,
    TbrIndicator,
    TarIndicator,
}

impl RewardKind {
    pub const ALL: [RewardKind; 7] = [
        RewardKind::Binary,
        RewardKind::Zhu,
        RewardKind::Magni,
        RewardKind::Triangle,
        RewardKind::TirIndicator,
        RewardKind::TbrIndicator,
        RewardKind::TarIndicator,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            RewardKind::Binary => "binary",
            RewardKind::Zhu => "zhu",
            RewardKind::Magni => "magni",
            RewardKind::Triangle => "triangle",
            RewardKind::TirIndicator => "tir_indicator",
            RewardKind::TbrIndicator => "tbr_indicator",
            RewardKind::TarIndicator => "tar_indicator",
        }
    }

    /// Indicator rewards whose discounted value reads out as a percentage of time.
    pub fn is_indicator(self) -> bool {
        matches!(
            self,
            RewardKind::TirIndicator | RewardKind::TbrIndicator | RewardKind::TarIndicator
        )
    }

    /// Bounds of the reward on the simulator's glycemia domain [20, 600] mg/dL.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            RewardKind::Zhu => (-2.0, 1.0),
            RewardKind::Magni => (-magni_risk(600.0).max(magni_risk(20.0)), 0.0),
            _ => (0.0, 1.0),
        }
    }

    pub fn eval(self, glycemia: f64) -> f64 {
        reward(self, glycemia)
    }
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for RewardKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        RewardKind::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| CoreError::UnknownTag {
                what: "reward kind",
                tag: s.to_string(),
            })
    }
}

const MAGNI_C0: f64 = 3.5506;
const MAGNI_C1: f64 = 0.8353;
const MAGNI_C2: f64 = 3.7932;

/// Magni risk `10·(c0·((ln g)^c1 − c2))²`; zero at `exp(c2^(1/c1))` ≈ 138.9 mg/dL.
pub fn magni_risk(g: f64) -> f64 {
    let g = g.max(1.0);
    10.0 * (MAGNI_C0 * (g.ln().powf(MAGNI_C1) - MAGNI_C2)).powi(2)
}

pub fn reward(kind: RewardKind, g: f64) -> f64 {
    match kind {
        RewardKind::Binary | RewardKind::TirIndicator => f64::from(u8::from((HYPO..=HYPER).contains(&g))),
        RewardKind::TbrIndicator => f64::from(u8::from(g < HYPO)),
        RewardKind::TarIndicator => f64::from(u8::from(g > HYPER)),
        RewardKind::Zhu => {
            if (90.0..=140.0).contains(&g) {
                1.0
            } else if (HYPO..=HYPER).contains(&g) {
                0.1
            } else if g > HYPER && g <= 300.0 {
                -1.0
            } else {
                -2.0
            }
        }
        RewardKind::Magni => -magni_risk(g),
        RewardKind::Triangle => {
            if (40.0..=HYPER).contains(&g) {
                (1.0 - (g - 110.0).abs() / 70.0).max(0.0)
            } else {
                0.0
            }
        }
    }
}

/// Metric columns of the correlation table, in output order.
pub const METRIC_NAMES: [&str; 6] = ["tir", "tbr", "tbr54", "tar", "cv", "mean_glycemia"];

fn metric_column(m: &ClinicalMetrics, idx: usize) -> f64 {
    match idx {
        0 => m.tir,
        1 => m.tbr,
        2 => m.tbr54,
        3 => m.tar,
        4 => m.cv,
        _ => m.mean_glycemia,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub kind: RewardKind,
    /// Pearson correlation per metric in `METRIC_NAMES` order; `None` when undefined.
    pub corr: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub n_days: usize,
    pub rows: Vec<CorrelationRow>,
}

impl CorrelationTable {
    pub fn get(&self, kind: RewardKind, metric: &str) -> Option<f64> {
        let col = METRIC_NAMES.iter().position(|m| *m == metric)?;
        self.rows.iter().find(|r| r.kind == kind)?.corr[col]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("reward");
        for m in METRIC_NAMES {
            out.push(',');
            out.push_str(m);
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(r.kind.tag());
            for c in &r.corr {
                out.push(',');
                match c {
                    Some(v) => out.push_str(&format!("{v:.6}")),
                    None => out.push_str("NA"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Pearson correlation; `None` when either column is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// For each patient-day: reward sum per kind and clinical metrics; then Pearson
/// correlation per (kind, metric). Rows sorted by |corr with TIR|, undefined last.
pub fn reward_metric_correlation(days: &[Vec<f64>], kinds: &[RewardKind]) -> Result<CorrelationTable> {
    if days.len() < 10 {
        return Err(CoreError::InsufficientData(format!(
            "correlation analysis needs at least 10 patient-days, got {}",
            days.len()
        )));
    }
    let metrics = days.iter().map(|d| compute_metrics(d)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let sums: Vec<f64> = days
            .iter()
            .map(|d| d.iter().map(|g| reward(kind, *g)).sum())
            .collect();
        let corr = (0..METRIC_NAMES.len())
            .map(|c| {
                let col: Vec<f64> = metrics.iter().map(|m| metric_column(m, c)).collect();
                pearson(&sums, &col)
            })
            .collect();
        rows.push(CorrelationRow { kind, corr });
    }
    rows.sort_by(|a, b| {
        let key = |r: &CorrelationRow| r.corr[0].map(f64::abs).unwrap_or(-1.0);
        key(b).total_cmp(&key(a)).then(a.kind.cmp(&b.kind))
    });
    Ok(CorrelationTable {
        n_days: days.len(),
        rows,
    })
}
