//! Synthetic GPU with per-partition ground truth.
//!
//! Each partition runs a workload whose standalone active power is linear in
//! its full-GPU-normalized utilization up to a saturation cap. Concurrent
//! workloads draw less than the sum of their standalone powers: the combined
//! active power is `S - gamma * (S - max_i P_i)`, and the deficit is charged
//! to partitions in proportion to their standalone power. That proportional
//! charge is the simulator's definition of the "fair" share.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiles::PartitionLayout;
use crate::telemetry::{Metric, MetricVector, TelemetrySample, Trace};

pub mod scenarios;

/// Locked SM clock used when a config does not set one.
pub const DEFAULT_SMCLK_MHZ: f64 = 1380.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub start_s: f64,
    pub end_s: f64,
    /// Partition-relative utilization targets while the phase runs.
    pub target: MetricVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub partition_id: String,
    pub phases: Vec<Phase>,
    /// Watts per unit of full-GPU-normalized utilization.
    pub slopes: BTreeMap<Metric, f64>,
    pub saturation_cap_w: f64,
    #[serde(default)]
    pub noise_sd_w: f64,
    /// Standard deviation of Gaussian jitter added to every nonzero target
    /// utilization at each sample (then clipped to [0, 1]).
    #[serde(default)]
    pub metric_jitter: f64,
}

impl WorkloadSpec {
    fn validate(&self) -> Result<()> {
        let id = &self.partition_id;
        for w in self.phases.windows(2) {
            if w[1].start_s < w[0].end_s {
                return Err(Error::Config(format!(
                    "workload `{id}`: phases [{}, {}) and [{}, {}) overlap or are out of order",
                    w[0].start_s, w[0].end_s, w[1].start_s, w[1].end_s
                )));
            }
        }
        for p in &self.phases {
            if !(p.start_s < p.end_s) {
                return Err(Error::Config(format!(
                    "workload `{id}`: phase [{}, {}) is empty",
                    p.start_s, p.end_s
                )));
            }
        }
        if let Some((m, s)) = self.slopes.iter().find(|(_, s)| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::Config(format!("workload `{id}`: slope for {m} is {s}")));
        }
        if !(self.saturation_cap_w > 0.0) {
            return Err(Error::Config(format!("workload `{id}`: saturation cap must be > 0")));
        }
        if !(self.noise_sd_w >= 0.0 && self.metric_jitter >= 0.0) {
            return Err(Error::Config(format!("workload `{id}`: negative noise")));
        }
        Ok(())
    }

    fn phase_at(&self, t: f64) -> Option<&Phase> {
        self.phases.iter().find(|p| p.start_s <= t && t < p.end_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub layout: PartitionLayout,
    #[serde(default)]
    pub workloads: Vec<WorkloadSpec>,
    pub idle_power_w: f64,
    #[serde(default)]
    pub interaction_gamma: f64,
    pub duration_s: f64,
    pub period_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_smclk")]
    pub smclk_mhz: f64,
}

fn default_smclk() -> f64 {
    DEFAULT_SMCLK_MHZ
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.idle_power_w >= 0.0 && self.idle_power_w.is_finite()) {
            return Err(Error::Config(format!("idle power {} must be ≥ 0", self.idle_power_w)));
        }
        if !(0.0..1.0).contains(&self.interaction_gamma) {
            return Err(Error::Config(format!(
                "interaction gamma {} outside [0, 1)",
                self.interaction_gamma
            )));
        }
        if !(self.period_s > 0.0 && self.duration_s >= 0.0) {
            return Err(Error::Config("period must be > 0 and duration ≥ 0".into()));
        }
        if !(self.smclk_mhz >= 0.0) {
            return Err(Error::Config("smclk must be ≥ 0".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for w in &self.workloads {
            if !self.layout.contains(&w.partition_id) {
                return Err(Error::Config(format!(
                    "workload on unknown partition `{}`",
                    w.partition_id
                )));
            }
            if !seen.insert(&w.partition_id) {
                return Err(Error::Config(format!(
                    "more than one workload on partition `{}`",
                    w.partition_id
                )));
            }
            w.validate()?;
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s / self.period_s + 1e-9).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSample {
    pub timestamp: f64,
    pub per_partition: BTreeMap<String, f64>,
    pub total_active_w: f64,
    /// Noisy measured power; unknown when loaded from a ground-truth file.
    pub total_power_w: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub samples: Vec<TruthSample>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Standalone active power of a workload for full-GPU-normalized metrics.
/// Absent metrics contribute nothing.
pub fn standalone_power(spec: &WorkloadSpec, normalized: &MetricVector) -> f64 {
    let linear: f64 = spec
        .slopes
        .iter()
        .map(|(m, s)| s * normalized.get(*m).unwrap_or(0.0))
        .sum();
    linear.min(spec.saturation_cap_w)
}

/// Combines standalone active powers of concurrent workloads.
///
/// Returns the per-partition true active power and their sum.
pub fn combine(actives: &BTreeMap<String, f64>, gamma: f64) -> (BTreeMap<String, f64>, f64) {
    let sum: f64 = actives.values().sum();
    let max = actives.values().copied().fold(0.0, f64::max);
    let deficit = gamma * (sum - max);
    let per: BTreeMap<String, f64> = actives
        .iter()
        .map(|(k, &a)| {
            let share = if sum > 0.0 { deficit * a / sum } else { 0.0 };
            (k.clone(), (a - share).max(0.0))
        })
        .collect();
    let total = per.values().sum();
    (per, total)
}

/// Runs the simulator. The output is a pure function of `config`.
pub fn simulate(config: &SimConfig) -> Result<(Trace, GroundTruth)> {
    config.validate()?;
    let layout = &config.layout;
    let n_norm = layout.total_layout_slices();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let by_partition: BTreeMap<&str, &WorkloadSpec> =
        config.workloads.iter().map(|w| (w.partition_id.as_str(), w)).collect();

    let n = config.n_samples();
    let mut samples = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);

    for i in 0..n {
        let t = i as f64 * config.period_s;
        let mut sample = TelemetrySample::new(t);
        let mut actives = BTreeMap::new();
        let mut noise_var = 0.0;

        for p in layout.partitions() {
            let idle = MetricVector::idle(config.smclk_mhz);
            let Some(w) = by_partition.get(p.id.as_str()) else {
                sample.per_partition.insert(p.id.clone(), idle);
                actives.insert(p.id.clone(), 0.0);
                continue;
            };
            let metrics = match w.phase_at(t) {
                Some(phase) => {
                    noise_var += w.noise_sd_w * w.noise_sd_w;
                    let mut m = idle;
                    for metric in Metric::FRACTIONS {
                        let target = phase.target.get(metric).unwrap_or(0.0);
                        let x = if target > 0.0 && w.metric_jitter > 0.0 {
                            (target + w.metric_jitter * unit.sample(&mut rng)).clamp(0.0, 1.0)
                        } else {
                            target
                        };
                        m.set_unchecked(metric, Some(x));
                    }
                    m
                }
                None => idle,
            };
            let factor = f64::from(p.compute_slices()) / f64::from(n_norm);
            let standalone = standalone_power(w, &metrics.scale_fractions(factor));
            sample.per_partition.insert(p.id.clone(), metrics);
            actives.insert(p.id.clone(), standalone);
        }

        let (per_partition, total_active) = combine(&actives, config.interaction_gamma);
        let noise = if noise_var > 0.0 {
            noise_var.sqrt() * unit.sample(&mut rng)
        } else {
            0.0
        };
        let power = (config.idle_power_w + total_active + noise).max(0.5 * config.idle_power_w);
        sample.gpu_power_w = Some(power);
        samples.push(sample);
        truth.push(TruthSample {
            timestamp: t,
            per_partition,
            total_active_w: total_active,
            total_power_w: Some(power),
        });
    }
    let trace = Trace::new(layout.clone(), samples, config.period_s)?;
    Ok((trace, GroundTruth { samples: truth }))
}

pub const GROUND_TRUTH_HEADER: [&str; 3] = ["timestamp", "partition_id", "true_active_w"];

#[derive(Serialize, Deserialize)]
struct TruthRow {
    timestamp: f64,
    partition_id: String,
    true_active_w: f64,
}

pub fn write_ground_truth<W: Write>(truth: &GroundTruth, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(writer));
    let err = |e: csv::Error| Error::Parse {
        line: 0,
        msg: e.to_string(),
    };
    for s in &truth.samples {
        for (id, &w_) in &s.per_partition {
            w.serialize(TruthRow {
                timestamp: s.timestamp,
                partition_id: id.clone(),
                true_active_w: w_,
            })
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io("<ground truth output>", e))?;
    Ok(())
}

pub fn save_ground_truth(truth: &GroundTruth, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_ground_truth(truth, f)
}

pub fn read_ground_truth<R: BufRead>(reader: R) -> Result<GroundTruth> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if headers.iter().ne(GROUND_TRUTH_HEADER) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `{}`", GROUND_TRUTH_HEADER.join(",")),
        });
    }
    let mut samples: Vec<TruthSample> = Vec::new();
    for rec in rdr.deserialize::<TruthRow>() {
        let row = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        match samples.last_mut() {
            Some(last) if last.timestamp == row.timestamp => {
                last.per_partition.insert(row.partition_id, row.true_active_w);
                last.total_active_w = last.per_partition.values().sum();
            }
            Some(last) if last.timestamp > row.timestamp => {
                return Err(Error::Ordering {
                    line: 0,
                    msg: format!("ground truth t={} after t={}", row.timestamp, last.timestamp),
                })
            }
            _ => samples.push(TruthSample {
                timestamp: row.timestamp,
                total_active_w: row.true_active_w,
                per_partition: BTreeMap::from([(row.partition_id, row.true_active_w)]),
                total_power_w: None,
            }),
        }
    }
    Ok(GroundTruth { samples })
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_ground_truth(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::{MigProfile, Partition};

    fn spec(slopes: &[(Metric, f64)], cap: f64) -> WorkloadSpec {
        WorkloadSpec {
            partition_id: "a".into(),
            phases: vec![],
            slopes: slopes.iter().copied().collect(),
            saturation_cap_w: cap,
            noise_sd_w: 0.0,
            metric_jitter: 0.0,
        }
    }

    fn mv(pairs: &[(Metric, f64)]) -> MetricVector {
        MetricVector::from_pairs(pairs.iter().copied()).unwrap()
    }

    #[test]
    fn standalone_linear_then_saturated() {
        let s = spec(&[(Metric::Fp32a, 200.0)], 150.0);
        assert_eq!(standalone_power(&s, &mv(&[(Metric::Fp32a, 0.5)])), 100.0);
        assert_eq!(standalone_power(&s, &mv(&[(Metric::Fp32a, 0.9)])), 150.0);
        assert_eq!(standalone_power(&s, &MetricVector::idle(1380.0)), 0.0);
    }

    fn map(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn combine_cases() {
        let (per, total) = combine(&map(&[("a", 100.0), ("b", 100.0)]), 0.0);
        assert_eq!(total, 200.0);
        assert_eq!(per, map(&[("a", 100.0), ("b", 100.0)]));

        // S = 200, max = 100, D = 0.2 * 100 = 20, split 10/10
        let (per, total) = combine(&map(&[("a", 100.0), ("b", 100.0)]), 0.2);
        assert!((total - 180.0).abs() < 1e-12);
        assert!((per["a"] - 90.0).abs() < 1e-12 && (per["b"] - 90.0).abs() < 1e-12);

        for g in [0.0, 0.3, 0.99] {
            let (per, total) = combine(&map(&[("solo", 123.4)]), g);
            assert_eq!(per["solo"], 123.4);
            assert_eq!(total, 123.4);
        }

        let (per, total) = combine(&map(&[("a", 0.0), ("b", 0.0)]), 0.5);
        assert_eq!(total, 0.0);
        assert!(per.values().all(|&v| v == 0.0));
    }

    pub(crate) fn two_partition_layout() -> PartitionLayout {
        PartitionLayout::a100(vec![
            Partition::new("2g", MigProfile::a100("2g.20gb").unwrap(), true),
            Partition::new("3g", MigProfile::a100("3g.40gb").unwrap(), true),
        ])
        .unwrap()
    }

    fn config(workloads: Vec<WorkloadSpec>, layout: PartitionLayout, gamma: f64) -> SimConfig {
        SimConfig {
            layout,
            workloads,
            idle_power_w: 85.0,
            interaction_gamma: gamma,
            duration_s: 100.0,
            period_s: 1.0,
            seed: 3,
            smclk_mhz: DEFAULT_SMCLK_MHZ,
        }
    }

    fn loaded(id: &str, slopes: &[(Metric, f64)], target: &[(Metric, f64)]) -> WorkloadSpec {
        WorkloadSpec {
            partition_id: id.into(),
            phases: vec![Phase {
                start_s: 0.0,
                end_s: 100.0,
                target: mv(target),
            }],
            slopes: slopes.iter().copied().collect(),
            saturation_cap_w: 400.0,
            noise_sd_w: 0.0,
            metric_jitter: 0.0,
        }
    }

    #[test]
    fn idle_only_trace() {
        let (trace, truth) = simulate(&config(vec![], two_partition_layout(), 0.2)).unwrap();
        assert_eq!(trace.len(), 100);
        assert!(trace.samples().iter().all(|s| s.gpu_power_w == Some(85.0)));
        assert!(truth.samples.iter().all(|s| s.total_active_w == 0.0));
    }

    #[test]
    fn single_full_gpu_workload() {
        let layout =
            PartitionLayout::a100(vec![Partition::new("7g", MigProfile::a100("7g.80gb").unwrap(), true)]).unwrap();
        let w = loaded("7g", &[(Metric::Fp32a, 200.0)], &[(Metric::Fp32a, 0.6)]);
        let expect = 85.0 + standalone_power(&w, &mv(&[(Metric::Fp32a, 0.6)]));
        let (trace, _) = simulate(&config(vec![w], layout, 0.7)).unwrap();
        for s in trace.samples() {
            assert_eq!(s.gpu_power_w, Some(expect));
        }
    }

    #[test]
    fn concurrency_is_sub_additive() {
        let a = loaded("2g", &[(Metric::Fp64a, 300.0)], &[(Metric::Fp64a, 0.9)]);
        let b = loaded("3g", &[(Metric::Fp32a, 250.0)], &[(Metric::Fp32a, 0.8)]);
        let alone = |w: &WorkloadSpec| {
            let (_, truth) = simulate(&config(vec![w.clone()], two_partition_layout(), 0.2)).unwrap();
            truth.samples[0].total_active_w
        };
        let (_, both) = simulate(&config(vec![a.clone(), b.clone()], two_partition_layout(), 0.2)).unwrap();
        assert!(both.samples[0].total_active_w < alone(&a) + alone(&b));
    }

    #[test]
    fn overlapping_phases_rejected() {
        let mut w = loaded("2g", &[(Metric::Fp32a, 100.0)], &[(Metric::Fp32a, 0.5)]);
        w.phases.push(Phase {
            start_s: 50.0,
            end_s: 120.0,
            target: mv(&[(Metric::Fp32a, 0.1)]),
        });
        assert!(matches!(
            simulate(&config(vec![w], two_partition_layout(), 0.0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = config(vec![], two_partition_layout(), 1.0);
        assert!(c.validate().is_err());
        c.interaction_gamma = 0.1;
        c.idle_power_w = -1.0;
        assert!(c.validate().is_err());
        let c = config(
            vec![loaded("9g", &[(Metric::Fp32a, 1.0)], &[(Metric::Fp32a, 0.5)])],
            two_partition_layout(),
            0.0,
        );
        assert!(c.validate().is_err());
    }

    #[test]
    fn ground_truth_file_round_trip() {
        let mut w = loaded("2g", &[(Metric::Fp32a, 210.0)], &[(Metric::Fp32a, 0.7)]);
        w.metric_jitter = 0.05;
        let (_, truth) = simulate(&config(vec![w], two_partition_layout(), 0.0)).unwrap();
        let mut buf = Vec::new();
        write_ground_truth(&truth, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("timestamp,partition_id,true_active_w\n"));
        let back = read_ground_truth(&buf[..]).unwrap();
        assert_eq!(back.len(), truth.len());
        for (a, b) in back.samples.iter().zip(&truth.samples) {
            assert_eq!(a.timestamp, b.timestamp);
            assert_eq!(a.per_partition, b.per_partition);
        }
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn layout() -> PartitionLayout {
        tests::two_partition_layout()
    }

    fn workload(id: &str, slope: f64, level: f64, jitter: f64, noise: f64) -> WorkloadSpec {
        WorkloadSpec {
            partition_id: id.into(),
            phases: vec![Phase {
                start_s: 0.0,
                end_s: 30.0,
                target: MetricVector::from_pairs([(Metric::Fp32a, level), (Metric::Drama, level / 2.0)]).unwrap(),
            }],
            slopes: [(Metric::Fp32a, slope), (Metric::Drama, slope / 3.0)]
                .into_iter()
                .collect(),
            saturation_cap_w: 1e4,
            noise_sd_w: noise,
            metric_jitter: jitter,
        }
    }

    fn cfg(a: WorkloadSpec, b: WorkloadSpec, gamma: f64, seed: u64) -> SimConfig {
        SimConfig {
            layout: layout(),
            workloads: vec![a, b],
            idle_power_w: 85.0,
            interaction_gamma: gamma,
            duration_s: 40.0,
            period_s: 1.0,
            seed,
            smclk_mhz: DEFAULT_SMCLK_MHZ,
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn deterministic(seed in any::<u64>(), gamma in 0.0..0.9f64) {
            let c = cfg(workload("2g", 300.0, 0.6, 0.05, 3.0), workload("3g", 200.0, 0.4, 0.05, 2.0), gamma, seed);
            let (t1, g1) = simulate(&c).unwrap();
            let (t2, g2) = simulate(&c).unwrap();
            prop_assert_eq!(t1, t2);
            prop_assert_eq!(g1, g2);
        }

        #[test]
        fn conservation(seed in any::<u64>(), gamma in 0.0..0.99f64) {
            let c = cfg(workload("2g", 300.0, 0.6, 0.1, 3.0), workload("3g", 200.0, 0.4, 0.1, 2.0), gamma, seed);
            let (_, truth) = simulate(&c).unwrap();
            for s in &truth.samples {
                let sum: f64 = s.per_partition.values().sum();
                prop_assert_eq!(sum, s.total_active_w);
            }
        }

        #[test]
        fn monotone_in_targets(l1 in 0.0..1.0f64, bump in 0.0..0.5f64, l2 in 0.0..1.0f64) {
            let hi = (l1 + bump).min(1.0);
            let run = |lvl: f64| {
                let c = cfg(workload("2g", 300.0, lvl, 0.0, 0.0), workload("3g", 200.0, l2, 0.0, 0.0), 0.0, 1);
                simulate(&c).unwrap().0.samples()[0].gpu_power_w.unwrap()
            };
            prop_assert!(run(hi) >= run(l1));
        }

        #[test]
        fn sub_additive(l1 in 0.05..1.0f64, l2 in 0.05..1.0f64, gamma in 0.01..0.99f64) {
            let a = workload("2g", 300.0, l1, 0.0, 0.0);
            let b = workload("3g", 200.0, l2, 0.0, 0.0);
            let mut solo_a = cfg(a.clone(), b.clone(), gamma, 0);
            solo_a.workloads.truncate(1);
            let mut solo_b = cfg(b.clone(), a.clone(), gamma, 0);
            solo_b.workloads.truncate(1);
            let sa = simulate(&solo_a).unwrap().1.samples[0].total_active_w;
            let sb = simulate(&solo_b).unwrap().1.samples[0].total_active_w;
            let both = simulate(&cfg(a, b, gamma, 0)).unwrap().1.samples[0].total_active_w;
            prop_assert!(both < sa + sb);
        }
    }
}
