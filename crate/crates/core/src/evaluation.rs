//! Attribution quality against simulator ground truth.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionResult;
use crate::error::{Error, Result};
use crate::simulator::GroundTruth;
use crate::stats::{abs_pct_errors, mean, Percentiles};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionErrors {
    /// `None` when the partition's true active power is zero throughout.
    pub mape: Option<f64>,
    pub mae_w: f64,
    pub percentiles: Option<Percentiles>,
    pub n_samples: usize,
    /// Samples left out of the percentage errors because truth was zero.
    pub n_zero_truth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub n_samples: usize,
    pub mean_w: f64,
    pub mean_abs_w: f64,
    pub max_abs_w: f64,
    /// Fraction of samples whose estimated total exceeds the measurement.
    pub overestimate_fraction: f64,
}

impl ResidualStats {
    pub fn of(result: &AttributionResult) -> Option<Self> {
        let r: Vec<f64> = result.samples.iter().filter_map(|s| s.residual_w).collect();
        if r.is_empty() {
            return None;
        }
        let abs: Vec<f64> = r.iter().map(|x| x.abs()).collect();
        Some(ResidualStats {
            n_samples: r.len(),
            mean_w: mean(&r),
            mean_abs_w: mean(&abs),
            max_abs_w: abs.iter().copied().fold(0.0, f64::max),
            overestimate_fraction: r.iter().filter(|&&x| x < 0.0).count() as f64 / r.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityEntry {
    pub partition_id: String,
    pub event_time: f64,
    pub shift_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_partition: BTreeMap<String, PartitionErrors>,
    /// Mean of the defined per-partition MAPEs.
    pub mean_mape: Option<f64>,
    pub residual: Option<ResidualStats>,
    pub stability: Vec<StabilityEntry>,
}

/// Errors of attributed active power against true active power.
pub fn compare_to_ground_truth(result: &AttributionResult, truth: &GroundTruth) -> Result<EvalReport> {
    if result.samples.len() != truth.samples.len() {
        return Err(Error::TimestampMismatch(format!(
            "{} attributed samples vs {} ground-truth samples",
            result.samples.len(),
            truth.samples.len()
        )));
    }
    let mut pairs: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (a, t) in result.samples.iter().zip(&truth.samples) {
        if (a.timestamp - t.timestamp).abs() > 1e-9 {
            return Err(Error::TimestampMismatch(format!("{} vs {}", a.timestamp, t.timestamp)));
        }
        for p in &a.partitions {
            let tv = t.per_partition.get(&p.partition_id).ok_or_else(|| {
                Error::TimestampMismatch(format!(
                    "partition `{}` missing from ground truth at t={}",
                    p.partition_id, t.timestamp
                ))
            })?;
            pairs.entry(p.partition_id.clone()).or_default().push((p.active_w, *tv));
        }
    }
    let per_partition: BTreeMap<String, PartitionErrors> = pairs
        .into_iter()
        .map(|(id, v)| {
            let (errs, zeros) = abs_pct_errors(v.iter().copied());
            let mae = v.iter().map(|(a, b)| (a - b).abs()).sum::<f64>() / v.len() as f64;
            let e = PartitionErrors {
                mape: (!errs.is_empty()).then(|| mean(&errs)),
                mae_w: mae,
                percentiles: Percentiles::of(&errs),
                n_samples: v.len(),
                n_zero_truth: zeros,
            };
            (id, e)
        })
        .collect();
    let mapes: Vec<f64> = per_partition.values().filter_map(|e| e.mape).collect();
    Ok(EvalReport {
        mean_mape: (!mapes.is_empty()).then(|| mean(&mapes)),
        per_partition,
        residual: ResidualStats::of(result),
        stability: Vec::new(),
    })
}

/// Absolute percentage errors of one partition at samples where its true
/// active power is positive.
pub fn partition_errors(result: &AttributionResult, truth: &GroundTruth, id: &str) -> Vec<f64> {
    let pairs = result.samples.iter().zip(&truth.samples).filter_map(|(a, t)| {
        let p = a.get(id)?;
        Some((p.active_w, *t.per_partition.get(id)?))
    });
    abs_pct_errors(pairs).0
}

/// Empirical CDF: one `(value, fraction of errors ≤ value)` point per
/// distinct value.
pub fn error_cdf(errors: &[f64]) -> Result<Vec<(f64, f64)>> {
    if errors.is_empty() {
        return Err(Error::Argument("CDF of an empty error series".into()));
    }
    let mut v = errors.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, x) in v.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *x => last.1 = frac,
            _ => out.push((*x, frac)),
        }
    }
    Ok(out)
}

pub fn write_cdf_csv<W: Write>(cdf: &[(f64, f64)], mut w: W) -> std::io::Result<()> {
    writeln!(w, "error_pct,cumulative_fraction")?;
    for (x, f) in cdf {
        writeln!(w, "{x},{f}")?;
    }
    Ok(())
}

/// Windows around an event used by [`stability_shift`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilityHorizon {
    pub pre_samples: usize,
    pub post_samples: usize,
    /// Samples skipped on each side of the event.
    pub transient_samples: usize,
}

impl Default for StabilityHorizon {
    fn default() -> Self {
        StabilityHorizon {
            pre_samples: 50,
            post_samples: 50,
            transient_samples: 5,
        }
    }
}

/// Percentage change of a partition's mean attributed active power across
/// an event where some other partition changed its load.
pub fn stability_shift(
    result: &AttributionResult,
    event_time: f64,
    fixed_partition: &str,
    horizon: &StabilityHorizon,
) -> Result<f64> {
    let series = result.active_series(fixed_partition);
    if series.is_empty() {
        return Err(Error::EmptyHorizon(format!(
            "no samples for partition `{fixed_partition}`"
        )));
    }
    let split = series.partition_point(|(t, _)| *t < event_time);
    let before_end = split.saturating_sub(horizon.transient_samples);
    let before_start = before_end.saturating_sub(horizon.pre_samples);
    let after_start = (split + horizon.transient_samples).min(series.len());
    let after_end = (after_start + horizon.post_samples).min(series.len());
    let before: Vec<f64> = series[before_start..before_end].iter().map(|x| x.1).collect();
    let after: Vec<f64> = series[after_start..after_end].iter().map(|x| x.1).collect();
    if before.is_empty() || after.is_empty() {
        return Err(Error::EmptyHorizon(format!("around t={event_time}")));
    }
    let mb = mean(&before);
    if mb == 0.0 {
        return Err(Error::EmptyHorizon(format!(
            "partition `{fixed_partition}` has zero mean active power before t={event_time}"
        )));
    }
    Ok((mean(&after) - mb).abs() / mb * 100.0)
}

/// Runs [`stability_shift`] for each `(event_time, changed_partition)` and
/// records the result under the fixed partition.
pub fn stability_report(
    result: &AttributionResult,
    events: &[(f64, String)],
    fixed_partition: &str,
    horizon: &StabilityHorizon,
) -> Result<Vec<StabilityEntry>> {
    events
        .iter()
        .map(|(t, _)| {
            Ok(StabilityEntry {
                partition_id: fixed_partition.to_string(),
                event_time: *t,
                shift_pct: stability_shift(result, *t, fixed_partition, horizon)?,
            })
        })
        .collect()
}
