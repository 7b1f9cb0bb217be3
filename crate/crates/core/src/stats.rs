//! Small descriptive-statistics helpers shared by model and attribution
//! evaluation.

use serde::{Deserialize, Serialize};

/// Nearest-rank percentile of an ascending slice; `q` in [0, 100].
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let n = sorted.len();
    let rank = ((q / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p90: f64,
    pub p95: f64,
    pub p99: f64,
}

impl Percentiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Percentiles {
            p50: percentile_sorted(&v, 50.0),
            p90: percentile_sorted(&v, 90.0),
            p95: percentile_sorted(&v, 95.0),
            p99: percentile_sorted(&v, 99.0),
        })
    }
}

/// Absolute percentage errors, skipping pairs whose reference is zero.
/// Returns the errors and the number of skipped pairs.
pub fn abs_pct_errors(pairs: impl IntoIterator<Item = (f64, f64)>) -> (Vec<f64>, usize) {
    let mut errs = Vec::new();
    let mut skipped = 0;
    for (pred, actual) in pairs {
        if actual == 0.0 {
            skipped += 1;
        } else {
            errs.push((pred - actual).abs() / actual.abs() * 100.0);
        }
    }
    (errs, skipped)
}
