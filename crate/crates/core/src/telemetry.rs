//! Trace data model and DCGM-style file ingestion.
//!
//! Per-partition metrics are stored exactly as the collector reports them,
//! i.e. as fractions of the partition's own capacity. Rescaling to full-GPU
//! units happens during attribution.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiles::PartitionLayout;

/// Entity name used for aggregate (whole-GPU) rows.
pub const GPU_ENTITY: &str = "GPU";

pub const CSV_HEADER: [&str; 11] = [
    "timestamp",
    "entity",
    "smact",
    "fp64a",
    "fp32a",
    "fp16a",
    "int16a",
    "tenso",
    "drama",
    "smclk",
    "power_w",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Smact,
    Fp64a,
    Fp32a,
    Fp16a,
    Int16a,
    Tenso,
    Drama,
    Smclk,
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::Smact,
        Metric::Fp64a,
        Metric::Fp32a,
        Metric::Fp16a,
        Metric::Int16a,
        Metric::Tenso,
        Metric::Drama,
        Metric::Smclk,
    ];

    /// Utilization metrics, i.e. everything but the clock.
    pub const FRACTIONS: [Metric; 7] = [
        Metric::Smact,
        Metric::Fp64a,
        Metric::Fp32a,
        Metric::Fp16a,
        Metric::Int16a,
        Metric::Tenso,
        Metric::Drama,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Smact => "smact",
            Metric::Fp64a => "fp64a",
            Metric::Fp32a => "fp32a",
            Metric::Fp16a => "fp16a",
            Metric::Int16a => "int16a",
            Metric::Tenso => "tenso",
            Metric::Drama => "drama",
            Metric::Smclk => "smclk",
        }
    }

    pub fn is_fraction(self) -> bool {
        self != Metric::Smclk
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Argument(format!("unknown metric `{s}`")))
    }
}

/// One reading of every DCGM metric; `None` marks a metric the source did
/// not report.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricVector {
    values: [Option<f64>; 8],
}

impl MetricVector {
    /// All utilizations zero at the given clock.
    pub fn idle(smclk_mhz: f64) -> Self {
        let mut v = MetricVector::default();
        for m in Metric::FRACTIONS {
            v.values[m.index()] = Some(0.0);
        }
        v.values[Metric::Smclk.index()] = Some(smclk_mhz);
        v
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Metric, f64)>) -> Result<Self> {
        let mut v = MetricVector::default();
        for (m, x) in pairs {
            v.set(m, x)?;
        }
        Ok(v)
    }

    pub fn get(&self, m: Metric) -> Option<f64> {
        self.values[m.index()]
    }

    /// Sets a metric, checking its range.
    pub fn set(&mut self, m: Metric, x: f64) -> Result<()> {
        check_metric(m, x, 0)?;
        self.values[m.index()] = Some(x);
        Ok(())
    }

    pub(crate) fn set_unchecked(&mut self, m: Metric, x: Option<f64>) {
        self.values[m.index()] = x;
    }

    pub fn with(mut self, m: Metric, x: f64) -> Result<Self> {
        self.set(m, x)?;
        Ok(self)
    }

    pub fn clear(&mut self, m: Metric) {
        self.values[m.index()] = None;
    }

    pub fn iter(&self) -> impl Iterator<Item = (Metric, Option<f64>)> + '_ {
        Metric::ALL.into_iter().map(|m| (m, self.get(m)))
    }

    /// True when every reported utilization is zero. Absent metrics are ignored.
    pub fn is_zero_utilization(&self) -> bool {
        Metric::FRACTIONS
            .into_iter()
            .all(|m| self.get(m).is_none_or(|x| x == 0.0))
    }

    /// Multiplies every present utilization by `factor`; the clock is untouched.
    pub fn scale_fractions(&self, factor: f64) -> Self {
        let mut out = *self;
        for m in Metric::FRACTIONS {
            if let Some(x) = self.get(m) {
                out.values[m.index()] = Some(x * factor);
            }
        }
        out
    }

    /// Zeroes every utilization, keeping the clock as observed.
    pub fn zero_fractions(&self) -> Self {
        let mut out = *self;
        for m in Metric::FRACTIONS {
            out.values[m.index()] = Some(0.0);
        }
        out
    }
}

impl Serialize for MetricVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let map: BTreeMap<Metric, f64> = self.iter().filter_map(|(m, x)| x.map(|x| (m, x))).collect();
        map.serialize(s)
    }
}

impl<'de> Deserialize<'de> for MetricVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<Metric, f64>::deserialize(d)?;
        MetricVector::from_pairs(map).map_err(serde::de::Error::custom)
    }
}

fn check_metric(m: Metric, x: f64, line: u64) -> Result<()> {
    let ok = x.is_finite() && x >= 0.0 && (!m.is_fraction() || x <= 1.0);
    if ok {
        Ok(())
    } else {
        Err(Error::Range {
            line,
            field: m.name().to_string(),
            value: x,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TelemetrySample {
    pub timestamp: f64,
    pub per_partition: BTreeMap<String, MetricVector>,
    /// Aggregate power; absent when the deployment has no power meter.
    pub gpu_power_w: Option<f64>,
    /// Aggregate metrics, when the collector also reports them.
    pub gpu_metrics: Option<MetricVector>,
}

impl TelemetrySample {
    pub fn new(timestamp: f64) -> Self {
        TelemetrySample {
            timestamp,
            per_partition: BTreeMap::new(),
            gpu_power_w: None,
            gpu_metrics: None,
        }
    }

    /// True when every partition reports zero utilization.
    pub fn is_zero_utilization(&self) -> bool {
        self.per_partition.values().all(MetricVector::is_zero_utilization)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    layout: PartitionLayout,
    samples: Vec<TelemetrySample>,
    period_s: f64,
}

impl Trace {
    pub fn new(layout: PartitionLayout, samples: Vec<TelemetrySample>, period_s: f64) -> Result<Self> {
        if !(period_s.is_finite() && period_s > 0.0) {
            return Err(Error::Argument(format!("sampling period {period_s} must be positive")));
        }
        for (i, s) in samples.iter().enumerate() {
            let line = i as u64 + 1;
            if !s.timestamp.is_finite() {
                return Err(Error::Ordering {
                    line,
                    msg: "non-finite timestamp".into(),
                });
            }
            if i > 0 && s.timestamp <= samples[i - 1].timestamp {
                return Err(Error::Ordering {
                    line,
                    msg: format!("{} follows {}", s.timestamp, samples[i - 1].timestamp),
                });
            }
            for id in s.per_partition.keys() {
                if !layout.contains(id) {
                    return Err(Error::UnknownPartition { line, id: id.clone() });
                }
            }
            if let Some(p) = s.gpu_power_w {
                if !(p.is_finite() && p >= 0.0) {
                    return Err(Error::Range {
                        line,
                        field: "power_w".into(),
                        value: p,
                    });
                }
            }
        }
        Ok(Trace {
            layout,
            samples,
            period_s,
        })
    }

    pub fn layout(&self) -> &PartitionLayout {
        &self.layout
    }

    pub fn samples(&self) -> &[TelemetrySample] {
        &self.samples
    }

    pub fn period_s(&self) -> f64 {
        self.period_s
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn timestamps(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.timestamp)
    }

    pub fn has_power(&self) -> bool {
        self.samples.iter().all(|s| s.gpu_power_w.is_some())
    }

    pub fn into_samples(self) -> Vec<TelemetrySample> {
        self.samples
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    #[default]
    Csv,
    Jsonl,
}

impl TraceFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TraceFormat::Csv => "csv",
            TraceFormat::Jsonl => "jsonl",
        }
    }

    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(TraceFormat::Csv),
            "jsonl" | "ndjson" => Some(TraceFormat::Jsonl),
            _ => None,
        }
    }
}

impl FromStr for TraceFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TraceFormat::Csv),
            "jsonl" => Ok(TraceFormat::Jsonl),
            _ => Err(Error::Argument(format!("unknown trace format `{s}`"))),
        }
    }
}

/// One file row: a partition reading or an aggregate `GPU` reading.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Row {
    timestamp: f64,
    entity: String,
    #[serde(default)]
    smact: Option<f64>,
    #[serde(default)]
    fp64a: Option<f64>,
    #[serde(default)]
    fp32a: Option<f64>,
    #[serde(default)]
    fp16a: Option<f64>,
    #[serde(default)]
    int16a: Option<f64>,
    #[serde(default)]
    tenso: Option<f64>,
    #[serde(default)]
    drama: Option<f64>,
    #[serde(default)]
    smclk: Option<f64>,
    #[serde(default)]
    power_w: Option<f64>,
}

impl Row {
    fn metrics(&self) -> [(Metric, Option<f64>); 8] {
        [
            (Metric::Smact, self.smact),
            (Metric::Fp64a, self.fp64a),
            (Metric::Fp32a, self.fp32a),
            (Metric::Fp16a, self.fp16a),
            (Metric::Int16a, self.int16a),
            (Metric::Tenso, self.tenso),
            (Metric::Drama, self.drama),
            (Metric::Smclk, self.smclk),
        ]
    }

    fn metric_vector(&self, line: u64) -> Result<MetricVector> {
        let mut v = MetricVector::default();
        for (m, x) in self.metrics() {
            if let Some(x) = x {
                check_metric(m, x, line)?;
            }
            v.set_unchecked(m, x);
        }
        Ok(v)
    }

    fn has_metrics(&self) -> bool {
        self.metrics().iter().any(|(_, x)| x.is_some())
    }

    fn from_metrics(timestamp: f64, entity: &str, v: &MetricVector, power_w: Option<f64>) -> Row {
        Row {
            timestamp,
            entity: entity.to_string(),
            smact: v.get(Metric::Smact),
            fp64a: v.get(Metric::Fp64a),
            fp32a: v.get(Metric::Fp32a),
            fp16a: v.get(Metric::Fp16a),
            int16a: v.get(Metric::Int16a),
            tenso: v.get(Metric::Tenso),
            drama: v.get(Metric::Drama),
            smclk: v.get(Metric::Smclk),
            power_w,
        }
    }
}

/// Folds time-ordered rows into samples, one per distinct timestamp.
struct SampleBuilder<'a> {
    layout: &'a PartitionLayout,
    samples: Vec<TelemetrySample>,
}

impl<'a> SampleBuilder<'a> {
    fn push(&mut self, row: Row, line: u64) -> Result<()> {
        if !row.timestamp.is_finite() {
            return Err(Error::Parse {
                line,
                msg: "non-finite timestamp".into(),
            });
        }
        let start_new = match self.samples.last() {
            None => true,
            Some(last) if row.timestamp > last.timestamp => true,
            Some(last) if row.timestamp == last.timestamp => false,
            Some(last) => {
                return Err(Error::Ordering {
                    line,
                    msg: format!("timestamp {} after {}", row.timestamp, last.timestamp),
                })
            }
        };
        if start_new {
            self.samples.push(TelemetrySample::new(row.timestamp));
        }
        let sample = self.samples.last_mut().expect("pushed above");

        if row.entity == GPU_ENTITY {
            if sample.gpu_power_w.is_some() || sample.gpu_metrics.is_some() {
                return Err(duplicate(line, &row));
            }
            if let Some(p) = row.power_w {
                if !(p.is_finite() && p >= 0.0) {
                    return Err(Error::Range {
                        line,
                        field: "power_w".into(),
                        value: p,
                    });
                }
            }
            sample.gpu_power_w = row.power_w;
            if row.has_metrics() {
                sample.gpu_metrics = Some(row.metric_vector(line)?);
            }
            return Ok(());
        }

        if !self.layout.contains(&row.entity) {
            return Err(Error::UnknownPartition { line, id: row.entity });
        }
        if row.power_w.is_some() {
            return Err(Error::Parse {
                line,
                msg: format!("power_w is only valid on `{GPU_ENTITY}` rows"),
            });
        }
        let v = row.metric_vector(line)?;
        if sample.per_partition.insert(row.entity.clone(), v).is_some() {
            return Err(duplicate(line, &row));
        }
        Ok(())
    }
}

fn duplicate(line: u64, row: &Row) -> Error {
    Error::Parse {
        line,
        msg: format!("duplicate row for `{}` at t={}", row.entity, row.timestamp),
    }
}

/// Reads a trace file. `period_s` is the nominal sampling period recorded on
/// the trace; it is not inferred from timestamps.
pub fn ingest_trace(
    path: impl AsRef<Path>,
    layout: &PartitionLayout,
    format: TraceFormat,
    period_s: f64,
) -> Result<Trace> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace(BufReader::new(file), layout, format, period_s)
}

pub fn read_trace<R: BufRead>(
    reader: R,
    layout: &PartitionLayout,
    format: TraceFormat,
    period_s: f64,
) -> Result<Trace> {
    let mut builder = SampleBuilder {
        layout,
        samples: Vec::new(),
    };
    match format {
        TraceFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
            let headers = rdr.headers().map_err(|e| csv_error(&e))?.clone();
            if headers.iter().ne(CSV_HEADER.iter().copied()) {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected header `{}`", CSV_HEADER.join(",")),
                });
            }
            for rec in rdr.records() {
                let rec = rec.map_err(|e| csv_error(&e))?;
                let line = rec.position().map_or(0, |p| p.line());
                let row: Row = rec.deserialize(Some(&headers)).map_err(|e| Error::Parse {
                    line,
                    msg: e.to_string(),
                })?;
                builder.push(row, line)?;
            }
        }
        TraceFormat::Jsonl => {
            for (i, line) in reader.lines().enumerate() {
                let lineno = i as u64 + 1;
                let text = line.map_err(|e| Error::Parse {
                    line: lineno,
                    msg: e.to_string(),
                })?;
                if text.trim().is_empty() {
                    continue;
                }
                let row: Row = serde_json::from_str(&text).map_err(|e| Error::Parse {
                    line: lineno,
                    msg: e.to_string(),
                })?;
                builder.push(row, lineno)?;
            }
        }
    }
    if builder.samples.is_empty() {
        return Err(Error::EmptyTrace);
    }
    Trace::new(layout.clone(), builder.samples, period_s)
}

fn csv_error(e: &csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

fn rows(trace: &Trace) -> impl Iterator<Item = Row> + '_ {
    trace.samples.iter().flat_map(move |s| {
        let parts = trace.layout.partitions().iter().filter_map(move |p| {
            s.per_partition
                .get(&p.id)
                .map(|v| Row::from_metrics(s.timestamp, &p.id, v, None))
        });
        let gpu = (s.gpu_power_w.is_some() || s.gpu_metrics.is_some()).then(|| {
            let v = s.gpu_metrics.unwrap_or_default();
            Row::from_metrics(s.timestamp, GPU_ENTITY, &v, s.gpu_power_w)
        });
        parts.chain(gpu)
    })
}

pub fn write_trace<W: Write>(trace: &Trace, writer: W, format: TraceFormat) -> Result<()> {
    let io = |e: std::io::Error| Error::io("<trace output>", e);
    match format {
        TraceFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
            w.write_record(CSV_HEADER).map_err(|e| csv_error(&e))?;
            for row in rows(trace) {
                w.serialize(row).map_err(|e| csv_error(&e))?;
            }
            w.flush().map_err(io)?;
        }
        TraceFormat::Jsonl => {
            let mut w = BufWriter::new(writer);
            for row in rows(trace) {
                let mut obj = serde_json::Map::new();
                obj.insert("timestamp".into(), row.timestamp.into());
                obj.insert("entity".into(), row.entity.clone().into());
                for (m, x) in row.metrics() {
                    if let Some(x) = x {
                        obj.insert(m.name().into(), x.into());
                    }
                }
                if let Some(p) = row.power_w {
                    obj.insert("power_w".into(), p.into());
                }
                serde_json::to_writer(&mut w, &obj).map_err(|e| io(e.into()))?;
                w.write_all(b"\n").map_err(io)?;
            }
            w.flush().map_err(io)?;
        }
    }
    Ok(())
}

pub fn save_trace(trace: &Trace, path: impl AsRef<Path>, format: TraceFormat) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace(trace, file, format).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// What a single collector reports at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Reading {
    pub timestamp: f64,
    pub metrics: Option<MetricVector>,
    pub power_w: Option<f64>,
}

/// A time-ordered stream from one collector, tagged with the entity it
/// describes (a partition id or [`GPU_ENTITY`]).
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSeries {
    pub entity: String,
    pub readings: Vec<Reading>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aligned {
    pub trace: Trace,
    /// Reference-clock instants dropped because some source had no reading
    /// within tolerance.
    pub dropped: usize,
}

/// Joins independently ticking sources onto one clock.
///
/// The longest source is the reference clock. Every other source contributes
/// its nearest unused reading within `tolerance_s`; a reference instant for
/// which any source has no such reading is dropped.
pub fn align(layout: &PartitionLayout, sources: &[SourceSeries], tolerance_s: f64, period_s: f64) -> Result<Aligned> {
    if !(tolerance_s >= 0.0) {
        return Err(Error::Argument(format!("tolerance {tolerance_s} must be ≥ 0")));
    }
    for src in sources {
        if src.entity != GPU_ENTITY && !layout.contains(&src.entity) {
            return Err(Error::UnknownPartition {
                line: 0,
                id: src.entity.clone(),
            });
        }
        if src.readings.windows(2).any(|w| w[1].timestamp <= w[0].timestamp) {
            return Err(Error::Ordering {
                line: 0,
                msg: format!("source `{}` is not strictly time-ordered", src.entity),
            });
        }
    }
    let Some(ref_idx) = (0..sources.len()).max_by_key(|&i| (sources[i].readings.len(), usize::MAX - i)) else {
        return Ok(Aligned {
            trace: Trace::new(layout.clone(), Vec::new(), period_s)?,
            dropped: 0,
        });
    };
    let reference = &sources[ref_idx];
    // cursor[i]: first reading of source i not yet consumed
    let mut cursor = vec![0usize; sources.len()];
    let mut samples = Vec::new();
    let mut dropped = 0;

    for r in &reference.readings {
        let t = r.timestamp;
        let mut picks = Vec::with_capacity(sources.len());
        let mut ok = true;
        for (i, src) in sources.iter().enumerate() {
            if i == ref_idx {
                picks.push(Some(r));
                continue;
            }
            let rest = &src.readings[cursor[i]..];
            let best = rest
                .iter()
                .enumerate()
                .take_while(|(_, x)| x.timestamp <= t + tolerance_s)
                .filter(|(_, x)| (x.timestamp - t).abs() <= tolerance_s)
                .min_by(|a, b| (a.1.timestamp - t).abs().total_cmp(&(b.1.timestamp - t).abs()));
            match best {
                Some((j, x)) => {
                    picks.push(Some(x));
                    cursor[i] += j + 1;
                }
                None => {
                    ok = false;
                    picks.push(None);
                }
            }
        }
        if !ok {
            dropped += 1;
            continue;
        }
        let mut sample = TelemetrySample::new(t);
        for (src, pick) in sources.iter().zip(picks) {
            let pick = pick.expect("all sources matched");
            if src.entity == GPU_ENTITY {
                sample.gpu_power_w = pick.power_w.or(sample.gpu_power_w);
                if pick.metrics.is_some() {
                    sample.gpu_metrics = pick.metrics;
                }
            } else if let Some(m) = pick.metrics {
                sample.per_partition.insert(src.entity.clone(), m);
            }
        }
        samples.push(sample);
    }
    Ok(Aligned {
        trace: Trace::new(layout.clone(), samples, period_s)?,
        dropped,
    })
}

/// Splits a trace back into one source per entity.
pub fn split_sources(trace: &Trace) -> Vec<SourceSeries> {
    let mut out: Vec<SourceSeries> = trace
        .layout
        .partitions()
        .iter()
        .map(|p| SourceSeries {
            entity: p.id.clone(),
            readings: trace
                .samples
                .iter()
                .filter_map(|s| {
                    s.per_partition.get(&p.id).map(|m| Reading {
                        timestamp: s.timestamp,
                        metrics: Some(*m),
                        power_w: None,
                    })
                })
                .collect(),
        })
        .filter(|s| !s.readings.is_empty())
        .collect();
    let gpu: Vec<Reading> = trace
        .samples
        .iter()
        .filter(|s| s.gpu_power_w.is_some() || s.gpu_metrics.is_some())
        .map(|s| Reading {
            timestamp: s.timestamp,
            metrics: s.gpu_metrics,
            power_w: s.gpu_power_w,
        })
        .collect();
    if !gpu.is_empty() {
        out.push(SourceSeries {
            entity: GPU_ENTITY.into(),
            readings: gpu,
        });
    }
    out
}

/// Sub-trace with timestamps in `[start_s, end_s)`.
pub fn window(trace: &Trace, start_s: f64, end_s: f64) -> Result<Trace> {
    if !(start_s < end_s) {
        return Err(Error::Argument(format!(
            "window [{start_s}, {end_s}) is empty or inverted"
        )));
    }
    let samples = trace
        .samples
        .iter()
        .filter(|s| s.timestamp >= start_s && s.timestamp < end_s)
        .cloned()
        .collect();
    Trace::new(trace.layout.clone(), samples, trace.period_s)
}
