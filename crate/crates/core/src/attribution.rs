//! Splitting measured GPU power among MIG partitions.
//!
//! Power is decomposed into an idle part, shared by assigned partitions in
//! proportion to their compute slices, and an active part estimated per
//! partition from a regression model. Estimates can then be scaled so that
//! they add up to the measured active power.
//!
//! Three estimators are provided:
//! * generic: one GPU-level model applied to each partition's normalized
//!   metrics on their own;
//! * workload-specific: the same, with a model chosen per partition;
//! * online MIG-feature: a model trained on the trace itself with one
//!   feature column per (partition, metric), queried with every other
//!   partition's utilization set to zero.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiles::{slice_fraction, MigProfile, PartitionLayout};
use crate::regress::{Dataset, FeatureSchema, PowerModel, TrainerConfig};
use crate::stats::percentile_sorted;
use crate::telemetry::{Metric, MetricVector, TelemetrySample, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdleSource {
    Configured,
    ModelAtZero,
    TraceFloor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdleModel {
    pub idle_power_w: f64,
    pub source: IdleSource,
}

impl IdleModel {
    pub fn configured(idle_power_w: f64) -> Result<Self> {
        if !(idle_power_w.is_finite() && idle_power_w >= 0.0) {
            return Err(Error::Argument(format!("idle power {idle_power_w} must be ≥ 0")));
        }
        Ok(IdleModel {
            idle_power_w,
            source: IdleSource::Configured,
        })
    }

    /// Model prediction with every feature set to zero, floored at 0.
    pub fn from_model(model: &PowerModel) -> Result<Self> {
        let zeros = vec![0.0; model.schema().len()];
        Ok(IdleModel {
            idle_power_w: model.predict(&zeros)?.max(0.0),
            source: IdleSource::ModelAtZero,
        })
    }

    /// 1st percentile of measured power over samples where no partition
    /// shows any utilization.
    pub fn from_trace_floor(trace: &Trace) -> Result<Self> {
        let mut idle: Vec<f64> = trace
            .samples()
            .iter()
            .filter(|s| s.is_zero_utilization())
            .filter_map(|s| s.gpu_power_w)
            .collect();
        if idle.is_empty() {
            return Err(Error::NoIdleSamples);
        }
        idle.sort_by(f64::total_cmp);
        Ok(IdleModel {
            idle_power_w: percentile_sorted(&idle, 1.0),
            source: IdleSource::TraceFloor,
        })
    }
}

/// How to obtain the idle model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum IdleMode {
    Configured { watts: f64 },
    ModelAtZero,
    TraceFloor,
}

pub fn estimate_idle(mode: IdleMode, model: Option<&PowerModel>, trace: Option<&Trace>) -> Result<IdleModel> {
    match mode {
        IdleMode::Configured { watts } => IdleModel::configured(watts),
        IdleMode::ModelAtZero => {
            IdleModel::from_model(model.ok_or_else(|| Error::Argument("model_at_zero idle needs a model".into()))?)
        }
        IdleMode::TraceFloor => {
            IdleModel::from_trace_floor(trace.ok_or_else(|| Error::Argument("trace_floor idle needs a trace".into()))?)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdleSplit {
    pub shares: BTreeMap<String, f64>,
    /// Idle power not attributed to any partition.
    pub residual_w: f64,
}

/// Shares idle power among assigned partitions by compute slices.
pub fn split_idle(idle: &IdleModel, layout: &PartitionLayout) -> IdleSplit {
    let n = layout.total_assigned_slices();
    if n == 0 {
        return IdleSplit {
            shares: BTreeMap::new(),
            residual_w: idle.idle_power_w,
        };
    }
    let shares = layout
        .assigned()
        .map(|p| {
            let f = slice_fraction(&p.profile, n).expect("n ≥ k for assigned partitions");
            (
                p.id.clone(),
                idle.idle_power_w * f64::from(*f.numer()) / f64::from(*f.denom()),
            )
        })
        .collect();
    IdleSplit {
        shares,
        residual_w: 0.0,
    }
}

/// Rescales partition-relative utilizations to full-GPU units by
/// `k / total_layout_slices`. The clock is passed through.
pub fn normalize(metrics: &MetricVector, profile: &MigProfile, layout: &PartitionLayout) -> MetricVector {
    let k = profile.compute_slices();
    let n = layout.total_layout_slices().max(k);
    let mut out = *metrics;
    for m in Metric::FRACTIONS {
        if let Some(x) = metrics.get(m) {
            out.set_unchecked(m, Some(x * f64::from(k) / f64::from(n)));
        }
    }
    out
}

fn feature_row<'a>(
    resolved: &[(Option<&str>, Metric)],
    lookup: impl Fn(Option<&str>) -> Option<&'a MetricVector>,
) -> Result<Vec<f64>> {
    resolved
        .iter()
        .map(|&(p, m)| {
            let v = lookup(p).ok_or_else(|| Error::MissingPartition(p.unwrap_or("GPU").to_string()))?;
            v.get(m).ok_or_else(|| Error::MissingMetric {
                partition: p.unwrap_or("GPU").to_string(),
                metric: m.name().to_string(),
            })
        })
        .collect()
}

fn partition_metrics<'a>(sample: &'a TelemetrySample, id: &str) -> Result<&'a MetricVector> {
    sample
        .per_partition
        .get(id)
        .ok_or_else(|| Error::MissingPartition(id.to_string()))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActiveEstimates {
    pub active: BTreeMap<String, f64>,
    /// Partitions whose prediction fell below idle and were clamped to 0.
    pub clamped: usize,
}

impl ActiveEstimates {
    fn push(&mut self, id: &str, raw_active: f64) {
        if raw_active < 0.0 {
            self.clamped += 1;
        }
        self.active.insert(id.to_string(), raw_active.max(0.0));
    }
}

fn predict_partition(model: &PowerModel, sample: &TelemetrySample, layout: &PartitionLayout, id: &str) -> Result<f64> {
    let schema = model.schema();
    if !schema.is_aggregate() {
        return Err(Error::SchemaMismatch(
            "per-partition estimation needs a GPU-level feature schema".into(),
        ));
    }
    let profile = &layout
        .get(id)
        .ok_or_else(|| Error::MissingPartition(id.into()))?
        .profile;
    let norm = normalize(partition_metrics(sample, id)?, profile, layout);
    let resolved = schema.resolve()?;
    let row = feature_row(&resolved, |_| Some(&norm))?;
    model.predict(&row)
}

/// Active power of each assigned partition from one GPU-level model.
/// Each estimate depends only on that partition's own metrics.
pub fn estimate_generic(
    model: &PowerModel,
    sample: &TelemetrySample,
    layout: &PartitionLayout,
    idle: &IdleModel,
) -> Result<ActiveEstimates> {
    let mut est = ActiveEstimates::default();
    for p in layout.assigned() {
        let pred = predict_partition(model, sample, layout, &p.id)?;
        est.push(&p.id, pred - idle.idle_power_w);
    }
    Ok(est)
}

pub fn estimate_workload_specific(
    models: &BTreeMap<String, PowerModel>,
    sample: &TelemetrySample,
    layout: &PartitionLayout,
    idle: &IdleModel,
) -> Result<ActiveEstimates> {
    let mut est = ActiveEstimates::default();
    for p in layout.assigned() {
        let model = models.get(&p.id).ok_or_else(|| Error::MissingModel(p.id.clone()))?;
        let pred = predict_partition(model, sample, layout, &p.id)?;
        est.push(&p.id, pred - idle.idle_power_w);
    }
    Ok(est)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scaled {
    pub active: BTreeMap<String, f64>,
    /// Measured active power was split by slice count because every
    /// estimate was zero.
    pub fallback: bool,
}

/// Redistributes measured active power in proportion to the estimates.
///
/// Measured active power is `measured_total_w - idle`, floored at 0. When
/// every estimate is zero but there is measured active power, it is split by
/// compute slices instead.
pub fn scale_active(
    actives: &BTreeMap<String, f64>,
    measured_total_w: f64,
    idle: &IdleModel,
    layout: &PartitionLayout,
) -> Scaled {
    let measured_active = (measured_total_w - idle.idle_power_w).max(0.0);
    let sum: f64 = actives.values().sum();
    if sum > 0.0 {
        return Scaled {
            active: actives
                .iter()
                .map(|(k, a)| (k.clone(), a / sum * measured_active))
                .collect(),
            fallback: false,
        };
    }
    let slices: BTreeMap<&str, u32> = actives
        .keys()
        .map(|k| (k.as_str(), layout.get(k).map_or(0, |p| p.compute_slices())))
        .collect();
    let total_slices: u32 = slices.values().sum();
    if measured_active > 0.0 && total_slices > 0 {
        return Scaled {
            active: slices
                .iter()
                .map(|(k, &s)| (k.to_string(), measured_active * f64::from(s) / f64::from(total_slices)))
                .collect(),
            fallback: true,
        };
    }
    Scaled {
        active: actives.keys().map(|k| (k.clone(), 0.0)).collect(),
        fallback: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Generic,
    WorkloadSpecific,
    OnlineMig,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Generic => "generic",
            MethodKind::WorkloadSpecific => "workload_specific",
            MethodKind::OnlineMig => "online_mig",
        }
    }
}

impl std::str::FromStr for MethodKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generic" => Ok(MethodKind::Generic),
            "workload_specific" | "workload-specific" => Ok(MethodKind::WorkloadSpecific),
            "online_mig" | "online" | "online-mig" => Ok(MethodKind::OnlineMig),
            _ => Err(Error::Argument(format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPower {
    pub partition_id: String,
    pub idle_w: f64,
    pub active_w: f64,
    pub total_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleAttribution {
    pub timestamp: f64,
    pub partitions: Vec<PartitionPower>,
    pub estimated_total_w: f64,
    pub measured_total_w: Option<f64>,
    /// `measured - estimated`; zero up to rounding when scaled.
    pub residual_w: Option<f64>,
}

impl SampleAttribution {
    pub fn get(&self, id: &str) -> Option<&PartitionPower> {
        self.partitions.iter().find(|p| p.partition_id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub method: MethodKind,
    pub scaled: bool,
    pub idle_power_w: f64,
    pub samples: Vec<SampleAttribution>,
    pub clamp_count: usize,
    pub fallback_count: usize,
    /// Models trained along the way (online method only).
    pub models_trained: usize,
}

impl AttributionResult {
    /// Time series of one partition's attributed active power.
    pub fn active_series(&self, id: &str) -> Vec<(f64, f64)> {
        self.samples
            .iter()
            .filter_map(|s| s.get(id).map(|p| (s.timestamp, p.active_w)))
            .collect()
    }

    pub fn partition_ids(&self) -> Vec<String> {
        self.samples
            .first()
            .map(|s| s.partitions.iter().map(|p| p.partition_id.clone()).collect())
            .unwrap_or_default()
    }
}

/// Settings for the online MIG-feature method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnlineConfig {
    pub trainer: TrainerConfig,
    /// Metrics expanded into one column per partition.
    pub metrics: Vec<Metric>,
    /// Tumbling window length in samples; a model is trained per window.
    pub window_samples: usize,
    pub min_train_samples: usize,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            trainer: TrainerConfig::default(),
            metrics: Metric::ALL.to_vec(),
            window_samples: 300,
            min_train_samples: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Method {
    Generic(PowerModel),
    WorkloadSpecific(BTreeMap<String, PowerModel>),
    Online(OnlineConfig),
}

impl Method {
    pub fn kind(&self) -> MethodKind {
        match self {
            Method::Generic(_) => MethodKind::Generic,
            Method::WorkloadSpecific(_) => MethodKind::WorkloadSpecific,
            Method::Online(_) => MethodKind::OnlineMig,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttributionConfig {
    pub method: Method,
    pub idle: IdleModel,
    pub scale: bool,
}

/// Combines idle shares and active estimates for one timestamp.
///
/// When scaling and measured power is below the idle model, the idle shares
/// shrink proportionally so the partition totals still add up to the
/// measurement.
#[allow(clippy::too_many_arguments)]
fn assemble(
    timestamp: f64,
    layout: &PartitionLayout,
    idle: &IdleModel,
    idle_split: &IdleSplit,
    est: ActiveEstimates,
    measured: Option<f64>,
    scale: bool,
    counters: &mut (usize, usize),
) -> Result<SampleAttribution> {
    counters.0 += est.clamped;
    let mut idle_factor = 1.0;
    let active = if scale {
        let m = measured.ok_or(Error::MissingPower(timestamp))?;
        if idle.idle_power_w > 0.0 && m < idle.idle_power_w {
            idle_factor = m / idle.idle_power_w;
        }
        let s = scale_active(&est.active, m, idle, layout);
        if s.fallback {
            counters.1 += 1;
        }
        s.active
    } else {
        est.active
    };
    let partitions: Vec<PartitionPower> = layout
        .assigned()
        .map(|p| {
            let idle_w = idle_split.shares.get(&p.id).copied().unwrap_or(0.0) * idle_factor;
            let active_w = active.get(&p.id).copied().unwrap_or(0.0);
            PartitionPower {
                partition_id: p.id.clone(),
                idle_w,
                active_w,
                total_w: idle_w + active_w,
            }
        })
        .collect();
    let estimated_total_w = partitions.iter().map(|p| p.total_w).sum();
    Ok(SampleAttribution {
        timestamp,
        partitions,
        estimated_total_w,
        measured_total_w: measured,
        residual_w: measured.map(|m| m - estimated_total_w),
    })
}

fn attribute_with<F>(
    trace: &Trace,
    idle: &IdleModel,
    scale: bool,
    method: MethodKind,
    estimate: F,
) -> Result<AttributionResult>
where
    F: Fn(&TelemetrySample) -> Result<ActiveEstimates> + Sync,
{
    let layout = trace.layout();
    let idle_split = split_idle(idle, layout);
    let parts: Vec<(SampleAttribution, (usize, usize))> = trace
        .samples()
        .par_iter()
        .map(|s| {
            let mut counters = (0, 0);
            let est = estimate(s)?;
            let a = assemble(
                s.timestamp,
                layout,
                idle,
                &idle_split,
                est,
                s.gpu_power_w,
                scale,
                &mut counters,
            )?;
            Ok((a, counters))
        })
        .collect::<Result<_>>()?;
    let clamp_count = parts.iter().map(|(_, c)| c.0).sum();
    let fallback_count = parts.iter().map(|(_, c)| c.1).sum();
    Ok(AttributionResult {
        method,
        scaled: scale,
        idle_power_w: idle.idle_power_w,
        samples: parts.into_iter().map(|(a, _)| a).collect(),
        clamp_count,
        fallback_count,
        models_trained: 0,
    })
}

/// GPU-level training set for generic models: the sample's GPU metrics
/// when recorded, otherwise the sum of the assigned partitions' normalized
/// utilizations with the highest partition clock. Target is measured power;
/// samples without it are skipped.
pub fn gpu_dataset(trace: &Trace, metrics: &[Metric]) -> Result<Dataset> {
    let layout = trace.layout();
    let schema = FeatureSchema::metrics(metrics)?;
    let resolved = schema.resolve()?;
    let mut values = Vec::new();
    let mut targets = Vec::new();
    for s in trace.samples() {
        let Some(power) = s.gpu_power_w else { continue };
        let gpu = match s.gpu_metrics {
            Some(m) => m,
            None => aggregate_metrics(&normalized_assigned(s, layout)?),
        };
        values.extend(feature_row(&resolved, |_| Some(&gpu))?);
        targets.push(power);
    }
    if targets.is_empty() {
        return Err(Error::NoMeasuredPower);
    }
    Dataset::new(schema, values, targets)
}

fn aggregate_metrics(normalized: &BTreeMap<String, MetricVector>) -> MetricVector {
    let mut out = MetricVector::default();
    for v in normalized.values() {
        for (m, x) in v.iter() {
            let Some(x) = x else { continue };
            let merged = match (out.get(m), m) {
                (None, _) => x,
                (Some(y), Metric::Smclk) => y.max(x),
                (Some(y), _) => y + x,
            };
            out.set_unchecked(m, Some(merged));
        }
    }
    out
}

/// Builds the MIG-feature training set: one column per (assigned partition,
/// metric) on normalized metrics, target the measured GPU power. Samples
/// without measured power are skipped.
pub fn mig_feature_dataset(window: &Trace, metrics: &[Metric]) -> Result<Dataset> {
    let layout = window.layout();
    let ids: Vec<&str> = layout.assigned().map(|p| p.id.as_str()).collect();
    let schema = FeatureSchema::per_partition(ids.iter().copied(), metrics)?;
    let resolved = schema.resolve()?;
    let mut values = Vec::new();
    let mut targets = Vec::new();
    for s in window.samples() {
        let Some(power) = s.gpu_power_w else { continue };
        let normalized = normalized_assigned(s, layout)?;
        values.extend(feature_row(&resolved, |p| p.and_then(|p| normalized.get(p)))?);
        targets.push(power);
    }
    if targets.is_empty() {
        return Err(Error::NoMeasuredPower);
    }
    Dataset::new(schema, values, targets)
}

fn normalized_assigned(s: &TelemetrySample, layout: &PartitionLayout) -> Result<BTreeMap<String, MetricVector>> {
    layout
        .assigned()
        .map(|p| {
            Ok((
                p.id.clone(),
                normalize(partition_metrics(s, &p.id)?, &p.profile, layout),
            ))
        })
        .collect()
}

/// First-stage estimates from a MIG-feature model: each partition is
/// evaluated with every other partition's utilizations set to zero (clocks
/// keep their observed value), then idle is deducted.
pub fn estimate_online(
    model: &PowerModel,
    sample: &TelemetrySample,
    layout: &PartitionLayout,
    idle: &IdleModel,
) -> Result<ActiveEstimates> {
    let resolved = model.schema().resolve()?;
    if resolved.iter().any(|(p, _)| p.is_none()) {
        return Err(Error::SchemaMismatch(
            "online estimation needs per-partition features".into(),
        ));
    }
    let normalized = normalized_assigned(sample, layout)?;
    let mut est = ActiveEstimates::default();
    for p in layout.assigned() {
        let masked: BTreeMap<&str, MetricVector> = normalized
            .iter()
            .map(|(k, v)| (k.as_str(), if *k == p.id { *v } else { v.zero_fractions() }))
            .collect();
        let row = feature_row(&resolved, |q| q.and_then(|q| masked.get(q)))?;
        est.push(&p.id, model.predict(&row)? - idle.idle_power_w);
    }
    Ok(est)
}

/// Trains a MIG-feature model on one window and attributes that window.
pub fn attribute_online(
    window: &Trace,
    idle: &IdleModel,
    config: &OnlineConfig,
    scale: bool,
) -> Result<(PowerModel, AttributionResult)> {
    let data = mig_feature_dataset(window, &config.metrics)?;
    if data.n_samples() < config.min_train_samples {
        return Err(Error::InsufficientSamples {
            have: data.n_samples(),
            need: config.min_train_samples,
        });
    }
    let model = config.trainer.fit(&data)?;
    let layout = window.layout();
    let mut result = attribute_with(window, idle, scale, MethodKind::OnlineMig, |s| {
        estimate_online(&model, s, layout, idle)
    })?;
    result.models_trained = 1;
    Ok((model, result))
}

/// Sample-index ranges of the tumbling windows. A trailing window shorter
/// than half the window length is merged into its predecessor.
pub fn tumbling_windows(n: usize, window: usize) -> Vec<std::ops::Range<usize>> {
    let window = window.max(1);
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(window).map(|s| s..(s + window).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() * 2 < window) {
        let tail = out.pop().expect("len > 1");
        out.last_mut().expect("len > 0").end = tail.end;
    }
    out
}

/// Attributes a whole trace with the configured method.
pub fn attribute(trace: &Trace, config: &AttributionConfig) -> Result<AttributionResult> {
    let layout = trace.layout();
    let idle = &config.idle;
    match &config.method {
        Method::Generic(model) => attribute_with(trace, idle, config.scale, MethodKind::Generic, |s| {
            estimate_generic(model, s, layout, idle)
        }),
        Method::WorkloadSpecific(models) => {
            if let Some(p) = layout.assigned().find(|p| !models.contains_key(&p.id)) {
                return Err(Error::MissingModel(p.id.clone()));
            }
            attribute_with(trace, idle, config.scale, MethodKind::WorkloadSpecific, |s| {
                estimate_workload_specific(models, s, layout, idle)
            })
        }
        Method::Online(online) => {
            let mut out = AttributionResult {
                method: MethodKind::OnlineMig,
                scaled: config.scale,
                idle_power_w: idle.idle_power_w,
                samples: Vec::with_capacity(trace.len()),
                clamp_count: 0,
                fallback_count: 0,
                models_trained: 0,
            };
            for range in tumbling_windows(trace.len(), online.window_samples) {
                let window = Trace::new(layout.clone(), trace.samples()[range].to_vec(), trace.period_s())?;
                let (_, part) = attribute_online(&window, idle, online, config.scale)?;
                out.samples.extend(part.samples);
                out.clamp_count += part.clamp_count;
                out.fallback_count += part.fallback_count;
                out.models_trained += part.models_trained;
            }
            Ok(out)
        }
    }
}

pub const ATTRIBUTION_HEADER: [&str; 7] = [
    "timestamp",
    "partition_id",
    "idle_w",
    "active_w",
    "total_w",
    "method",
    "scaled",
];

#[derive(Serialize, Deserialize)]
struct AttributionRow {
    timestamp: f64,
    partition_id: String,
    idle_w: f64,
    active_w: f64,
    total_w: f64,
    method: MethodKind,
    scaled: bool,
}

pub fn write_attribution_csv<W: Write>(result: &AttributionResult, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(writer));
    let err = |e: csv::Error| Error::Parse {
        line: 0,
        msg: e.to_string(),
    };
    w.write_record(ATTRIBUTION_HEADER).map_err(err)?;
    for s in &result.samples {
        for p in &s.partitions {
            w.serialize(AttributionRow {
                timestamp: s.timestamp,
                partition_id: p.partition_id.clone(),
                idle_w: p.idle_w,
                active_w: p.active_w,
                total_w: p.total_w,
                method: result.method,
                scaled: result.scaled,
            })
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io("<attribution output>", e))?;
    Ok(())
}

pub fn save_attribution_csv(result: &AttributionResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_attribution_csv(result, f)
}

/// Reads an attribution CSV. Measured totals are not part of the file; pass
/// the trace to [`attach_measurements`] to restore them.
pub fn read_attribution_csv<R: BufRead>(reader: R) -> Result<AttributionResult> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if headers.iter().ne(ATTRIBUTION_HEADER) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `{}`", ATTRIBUTION_HEADER.join(",")),
        });
    }
    let mut meta: Option<(MethodKind, bool)> = None;
    let mut samples: Vec<SampleAttribution> = Vec::new();
    for rec in rdr.deserialize::<AttributionRow>() {
        let row = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        meta.get_or_insert((row.method, row.scaled));
        let p = PartitionPower {
            partition_id: row.partition_id,
            idle_w: row.idle_w,
            active_w: row.active_w,
            total_w: row.total_w,
        };
        match samples.last_mut() {
            Some(last) if last.timestamp == row.timestamp => {
                last.estimated_total_w += p.total_w;
                last.partitions.push(p);
            }
            Some(last) if last.timestamp > row.timestamp => {
                return Err(Error::Ordering {
                    line: 0,
                    msg: format!("attribution t={} after t={}", row.timestamp, last.timestamp),
                })
            }
            _ => samples.push(SampleAttribution {
                timestamp: row.timestamp,
                estimated_total_w: p.total_w,
                partitions: vec![p],
                measured_total_w: None,
                residual_w: None,
            }),
        }
    }
    let (method, scaled) = meta.ok_or(Error::EmptyTrace)?;
    let idle_power_w = samples
        .first()
        .map_or(0.0, |s| s.partitions.iter().map(|p| p.idle_w).sum());
    Ok(AttributionResult {
        method,
        scaled,
        idle_power_w,
        samples,
        clamp_count: 0,
        fallback_count: 0,
        models_trained: 0,
    })
}

pub fn load_attribution_csv(path: impl AsRef<Path>) -> Result<AttributionResult> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_attribution_csv(BufReader::new(f))
}

/// Copies measured power from a trace into an attribution read from disk.
pub fn attach_measurements(result: &mut AttributionResult, trace: &Trace) -> Result<()> {
    if result.samples.len() != trace.len() {
        return Err(Error::TimestampMismatch(format!(
            "{} attributed samples vs {} trace samples",
            result.samples.len(),
            trace.len()
        )));
    }
    for (a, s) in result.samples.iter_mut().zip(trace.samples()) {
        if (a.timestamp - s.timestamp).abs() > 1e-9 {
            return Err(Error::TimestampMismatch(format!("{} vs {}", a.timestamp, s.timestamp)));
        }
        a.measured_total_w = s.gpu_power_w;
        a.residual_w = s.gpu_power_w.map(|m| m - a.estimated_total_w);
    }
    Ok(())
}


#[cfg(test)]
mod proptests {
    use super::*;
    use crate::profiles::Partition;
    use proptest::prelude::*;

    fn p23() -> PartitionLayout {
        PartitionLayout::a100(vec![
            Partition::new("2g", MigProfile::a100("2g.20gb").unwrap(), true),
            Partition::new("3g", MigProfile::a100("3g.40gb").unwrap(), true),
        ])
        .unwrap()
    }

    proptest! {
        #[test]
        fn scaling_preserves_sum_and_ratios(
            a in 0.0..500.0f64,
            b in 0.0..500.0f64,
            measured in 0.0..900.0f64,
        ) {
            let idle = IdleModel::configured(85.0).unwrap();
            let est: BTreeMap<String, f64> = [("2g".to_string(), a), ("3g".to_string(), b)].into();
            let s = scale_active(&est, measured, &idle, &p23());
            let target = (measured - 85.0).max(0.0);
            let sum: f64 = s.active.values().sum();
            prop_assert!((sum - target).abs() <= 1e-9 * target.max(1.0));
            prop_assert!(s.active.values().all(|&v| v >= 0.0));
            if a > 1e-6 && b > 1e-6 && target > 0.0 {
                prop_assert_eq!(a > b, s.active["2g"] > s.active["3g"]);
                prop_assert!((s.active["2g"] / s.active["3g"] - a / b).abs() <= 1e-9 * (a / b));
            }
        }

        #[test]
        fn idle_shares_proportional_to_slices(idle in 0.0..500.0f64) {
            let s = split_idle(&IdleModel::configured(idle).unwrap(), &p23());
            prop_assert!((s.shares["2g"] * 3.0 - s.shares["3g"] * 2.0).abs() <= 1e-9 * idle.max(1.0));
            prop_assert!((s.shares.values().sum::<f64>() - idle).abs() <= 1e-9 * idle.max(1.0));
        }
    }
}
