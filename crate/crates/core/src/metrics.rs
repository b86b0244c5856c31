//! Glycemia control metrics on a uniformly sampled CGM series.
//!
//! Band convention: 70 and 180 mg/dL are in range, so TIR, TBR and TAR
//! partition every sample.

use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

pub const HYPO: f64 = 70.0;
pub const SEVERE_HYPO: f64 = 54.0;
pub const HYPER: f64 = 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClinicalMetrics {
    pub tir: f64,
    pub tbr: f64,
    pub tbr54: f64,
    pub tar: f64,
    pub cv: f64,
    pub mean_glycemia: f64,
    pub n_samples: usize,
}

impl ClinicalMetrics {
    /// `tir + tbr + tar`, evaluated left to right. Always exactly 100.
    pub fn band_sum(&self) -> f64 {
        self.tir + self.tbr + self.tar
    }
}

pub fn in_range(g: f64) -> bool {
    (HYPO..=HYPER).contains(&g)
}

pub fn compute_metrics(series: &[f64]) -> Result<ClinicalMetrics> {
    if series.is_empty() {
        return Err(CoreError::EmptyInput("glycemia series"));
    }
    if let Some(bad) = series.iter().find(|g| !g.is_finite() || **g <= 0.0) {
        return Err(CoreError::InvalidValue(format!("glycemia {bad} is not a finite positive value")));
    }
    let n = series.len();
    let (mut below, mut below54, mut inside) = (0usize, 0usize, 0usize);
    let mut sum = 0.0f64;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &g in series {
        if g < HYPO {
            below += 1;
            if g < SEVERE_HYPO {
                below54 += 1;
            }
        } else if g <= HYPER {
            inside += 1;
        }
        sum += g;
        lo = lo.min(g);
        hi = hi.max(g);
    }
    let pct = |k: usize| 100.0 * k as f64 / n as f64;
    let tir = pct(inside);
    let tbr = pct(below);
    let tar = complement(tir + tbr);

    let mean = if lo == hi { lo } else { sum / n as f64 };
    let cv = if lo == hi {
        0.0
    } else {
        let var = series.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n as f64;
        100.0 * var.sqrt() / mean
    };
    Ok(ClinicalMetrics {
        tir,
        tbr,
        tbr54: pct(below54),
        tar,
        cv,
        mean_glycemia: mean,
        n_samples: n,
    })
}

/// Smallest adjustment of `100 − s` such that `s + result == 100` in floating point.
fn complement(s: f64) -> f64 {
    let mut t = 100.0 - s;
    for _ in 0..4 {
        let total = s + t;
        if total == 100.0 {
            break;
        }
        t = if total > 100.0 { next_down(t) } else { next_up(t) };
    }
    t.max(0.0)
}

fn next_up(x: f64) -> f64 {
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let b = x.to_bits();
    f64::from_bits(if x > 0.0 { b + 1 } else { b - 1 })
}

fn next_down(x: f64) -> f64 {
    -next_up(-x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counting_example() {
        let mut s = vec![100.0; 8];
        s.extend([200.0, 200.0]);
        let m = compute_metrics(&s).unwrap();
        assert_eq!(m.tir, 80.0);
        assert_eq!(m.tar, 20.0);
        assert_eq!(m.tbr, 0.0);
        assert_eq!(m.mean_glycemia, 120.0);
    }

    #[test]
    fn constant_series() {
        let m = compute_metrics(&[110.0; 50]).unwrap();
        assert_eq!(m.cv, 0.0);
        assert_eq!(m.tir, 100.0);
        let m = compute_metrics(&[110.3; 7]).unwrap();
        assert_eq!(m.cv, 0.0);
        assert_eq!(m.mean_glycemia, 110.3);
    }

    #[test]
    fn band_edges() {
        let m = compute_metrics(&[60.0, 50.0, 110.0]).unwrap();
        assert!((m.tbr - 66.666_666_666_666_67).abs() < 1e-9);
        assert!((m.tbr54 - 33.333_333_333_333_33).abs() < 1e-9);
        let m = compute_metrics(&[70.0, 180.0, 69.999, 180.001]).unwrap();
        assert_eq!(m.tir, 50.0);
        assert_eq!(m.tbr, 25.0);
        assert_eq!(m.tar, 25.0);
    }

    #[test]
    fn cv_definition() {
        let m = compute_metrics(&[100.0, 200.0]).unwrap();
        assert!((m.cv - 100.0 * 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(compute_metrics(&[]).is_err());
        assert!(compute_metrics(&[100.0, f64::NAN]).is_err());
        assert!(compute_metrics(&[-5.0]).is_err());
    }

    proptest! {
        #[test]
        fn bands_partition_exactly(series in proptest::collection::vec(20.0f64..600.0, 1..400)) {
            let m = compute_metrics(&series).unwrap();
            prop_assert_eq!(m.band_sum(), 100.0);
            prop_assert!(m.tbr54 <= m.tbr);
            prop_assert!(m.tar >= 0.0);
        }

        #[test]
        fn order_free(mut series in proptest::collection::vec(20.0f64..600.0, 1..100), seed in any::<u64>()) {
            let a = compute_metrics(&series).unwrap();
            // deterministic shuffle
            let n = series.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                series.swap(i, (s >> 33) as usize % (i + 1));
            }
            let b = compute_metrics(&series).unwrap();
            prop_assert_eq!(a.tir, b.tir);
            prop_assert_eq!(a.tbr, b.tbr);
            prop_assert_eq!(a.tbr54, b.tbr54);
            prop_assert_eq!(a.tar, b.tar);
            prop_assert!((a.mean_glycemia - b.mean_glycemia).abs() < 1e-9);
            prop_assert!((a.cv - b.cv).abs() < 1e-9);
        }
    }
}
