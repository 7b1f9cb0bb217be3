//! Energy and emissions per partition from an attribution time series.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionResult;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionEnergy {
    pub energy_kwh: f64,
    pub emissions_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub carbon_intensity_g_per_kwh: f64,
    pub duration_s: f64,
    pub per_partition: BTreeMap<String, PartitionEnergy>,
    /// Sum over partitions.
    pub attributed_kwh: f64,
    /// From measured power, when the attribution carries it.
    pub measured_kwh: Option<f64>,
}

/// Trapezoidal integral of a watt series, in kWh.
pub fn integrate_kwh(series: &[(f64, f64)]) -> f64 {
    let joules: f64 = series
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    joules / 3.6e6
}

pub fn energy_report(result: &AttributionResult, carbon_intensity_g_per_kwh: f64) -> Result<EnergyReport> {
    if !(carbon_intensity_g_per_kwh >= 0.0 && carbon_intensity_g_per_kwh.is_finite()) {
        return Err(Error::Argument(format!(
            "carbon intensity {carbon_intensity_g_per_kwh} must be ≥ 0"
        )));
    }
    let mut per_partition = BTreeMap::new();
    for id in result.partition_ids() {
        let series: Vec<(f64, f64)> = result
            .samples
            .iter()
            .filter_map(|s| s.get(&id).map(|p| (s.timestamp, p.total_w)))
            .collect();
        let kwh = integrate_kwh(&series);
        per_partition.insert(
            id,
            PartitionEnergy {
                energy_kwh: kwh,
                emissions_g: kwh * carbon_intensity_g_per_kwh,
            },
        );
    }
    let measured: Option<Vec<(f64, f64)>> = result
        .samples
        .iter()
        .map(|s| s.measured_total_w.map(|m| (s.timestamp, m)))
        .collect();
    let duration_s = match (result.samples.first(), result.samples.last()) {
        (Some(a), Some(b)) => b.timestamp - a.timestamp,
        _ => 0.0,
    };
    Ok(EnergyReport {
        carbon_intensity_g_per_kwh,
        duration_s,
        attributed_kwh: per_partition.values().map(|p| p.energy_kwh).sum(),
        per_partition,
        measured_kwh: measured.map(|m| integrate_kwh(&m)),
    })
}
