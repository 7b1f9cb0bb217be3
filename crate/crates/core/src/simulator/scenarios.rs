//! Ready-made simulator configurations.
//!
//! `reference` is a full-GPU run across many utilization mixes, used to
//! train GPU-level ("generic") models. The multi-partition scenarios run
//! workloads whose power characteristics differ from that reference.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Phase, SimConfig, WorkloadSpec, DEFAULT_SMCLK_MHZ};
use crate::profiles::{MigProfile, Partition, PartitionLayout};
use crate::telemetry::{Metric, MetricVector};

/// Idle power of an A100-80GB with clocks above 1200 MHz.
pub const A100_IDLE_W: f64 = 85.0;

/// Active-power cap for a full A100.
pub const A100_ACTIVE_CAP_W: f64 = 340.0;

/// Slopes of the reference workload mix, watts per unit full-GPU utilization.
pub fn reference_slopes() -> BTreeMap<Metric, f64> {
    [
        (Metric::Smact, 40.0),
        (Metric::Fp64a, 150.0),
        (Metric::Fp32a, 180.0),
        (Metric::Fp16a, 90.0),
        (Metric::Int16a, 60.0),
        (Metric::Tenso, 220.0),
        (Metric::Drama, 110.0),
    ]
    .into()
}

/// FP64-heavy job drawing far less per unit of utilization than the reference.
pub fn hpc_slopes() -> BTreeMap<Metric, f64> {
    [(Metric::Smact, 20.0), (Metric::Fp64a, 70.0), (Metric::Drama, 50.0)].into()
}

/// FP32/memory-bound job close to the reference.
pub fn fp32_slopes() -> BTreeMap<Metric, f64> {
    [(Metric::Smact, 36.0), (Metric::Fp32a, 165.0), (Metric::Drama, 95.0)].into()
}

/// Tensor-core job.
pub fn tensor_slopes() -> BTreeMap<Metric, f64> {
    [
        (Metric::Smact, 30.0),
        (Metric::Tenso, 180.0),
        (Metric::Fp16a, 70.0),
        (Metric::Drama, 85.0),
    ]
    .into()
}

fn mv(pairs: &[(Metric, f64)]) -> MetricVector {
    MetricVector::from_pairs(pairs.iter().copied()).expect("valid scenario metrics")
}

pub fn hpc_target() -> MetricVector {
    mv(&[(Metric::Smact, 0.9), (Metric::Fp64a, 0.75), (Metric::Drama, 0.45)])
}

pub fn fp32_target() -> MetricVector {
    mv(&[(Metric::Smact, 0.85), (Metric::Fp32a, 0.7), (Metric::Drama, 0.5)])
}

pub fn tensor_target() -> MetricVector {
    mv(&[
        (Metric::Smact, 0.8),
        (Metric::Tenso, 0.85),
        (Metric::Fp16a, 0.5),
        (Metric::Drama, 0.4),
    ])
}

fn workload(
    id: &str,
    slopes: BTreeMap<Metric, f64>,
    spans: &[(f64, f64)],
    target: MetricVector,
    noise_sd_w: f64,
) -> WorkloadSpec {
    WorkloadSpec {
        partition_id: id.into(),
        phases: spans
            .iter()
            .map(|&(start_s, end_s)| Phase { start_s, end_s, target })
            .collect(),
        slopes,
        saturation_cap_w: A100_ACTIVE_CAP_W,
        noise_sd_w,
        metric_jitter: 0.06,
    }
}

fn part(id: &str, profile: &str) -> Partition {
    Partition::new(id, MigProfile::a100(profile).expect("A100 profile"), true)
}

fn pair_layout() -> PartitionLayout {
    PartitionLayout::a100(vec![part("2g", "2g.20gb"), part("3g", "3g.40gb")]).expect("layout")
}

fn base(layout: PartitionLayout, workloads: Vec<WorkloadSpec>, gamma: f64, duration_s: f64, seed: u64) -> SimConfig {
    SimConfig {
        layout,
        workloads,
        idle_power_w: A100_IDLE_W,
        interaction_gamma: gamma,
        duration_s,
        period_s: 1.0,
        seed,
        smclk_mhz: DEFAULT_SMCLK_MHZ,
    }
}

/// Full-GPU (7g) run over `n_phases` random utilization mixes of 20 s each,
/// after 20 s of idle. Never saturates, so power is linear in the metrics
/// apart from noise.
pub fn reference(n_phases: usize, noise_sd_w: f64, seed: u64) -> SimConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_7e57);
    let phase_len = 20.0;
    let phases = (0..n_phases)
        .map(|i| {
            let start_s = phase_len * (i + 1) as f64;
            let mut target = MetricVector::idle(DEFAULT_SMCLK_MHZ);
            for m in Metric::FRACTIONS {
                target.set(m, rng.random_range(0.1..0.6)).expect("fraction");
            }
            Phase {
                start_s,
                end_s: start_s + phase_len,
                target,
            }
        })
        .collect();
    let w = WorkloadSpec {
        partition_id: "gpu".into(),
        phases,
        slopes: reference_slopes(),
        saturation_cap_w: 1000.0,
        noise_sd_w,
        metric_jitter: 0.05,
    };
    let layout = PartitionLayout::a100(vec![part("gpu", "7g.80gb")]).expect("7g layout");
    base(layout, vec![w], 0.0, phase_len * (n_phases + 1) as f64, seed)
}

/// 2g and 3g running reference-like workloads over overlapping phases.
pub fn linear_pair(gamma: f64, noise_sd_w: f64, seed: u64) -> SimConfig {
    let target_a = mv(&[
        (Metric::Smact, 0.8),
        (Metric::Fp32a, 0.6),
        (Metric::Drama, 0.5),
        (Metric::Tenso, 0.3),
    ]);
    let target_b = mv(&[
        (Metric::Smact, 0.7),
        (Metric::Fp64a, 0.5),
        (Metric::Drama, 0.6),
        (Metric::Fp16a, 0.2),
    ]);
    let a = workload(
        "2g",
        reference_slopes(),
        &[(0.0, 420.0), (480.0, 600.0)],
        target_a,
        noise_sd_w,
    );
    let b = workload("3g", reference_slopes(), &[(100.0, 540.0)], target_b, noise_sd_w);
    base(pair_layout(), vec![a, b], gamma, 600.0, seed)
}

/// When 3g joins in [`join`].
pub const JOIN_3G_START_S: f64 = 300.0;

/// 2g (tensor job) starts alone and 3g (FP64 job) joins later; both then
/// run to the end.
pub fn join(gamma: f64, seed: u64) -> SimConfig {
    let a = workload("2g", tensor_slopes(), &[(50.0, 850.0)], tensor_target(), 1.5);
    let b = workload("3g", hpc_slopes(), &[(JOIN_3G_START_S, 850.0)], hpc_target(), 1.5);
    base(pair_layout(), vec![a, b], gamma, 900.0, seed)
}

/// Times at which 3g switches on or off in [`toggle`].
pub const TOGGLE_EVENTS_S: [f64; 3] = [300.0, 600.0, 900.0];

/// 2g holds a fixed tensor load; 3g runs an FP64 job switched on, off and
/// on again.
pub fn toggle(gamma: f64, seed: u64) -> SimConfig {
    let a = workload("2g", tensor_slopes(), &[(0.0, 1200.0)], tensor_target(), 1.5);
    let b = workload(
        "3g",
        hpc_slopes(),
        &[(300.0, 600.0), (900.0, 1200.0)],
        hpc_target(),
        1.5,
    );
    base(pair_layout(), vec![a, b], gamma, 1200.0, seed)
}

/// Times at which 1g or 3g start, stop or resume in [`three_partition`].
pub const THREE_PARTITION_EVENTS_S: [f64; 5] = [150.0, 300.0, 450.0, 600.0, 750.0];

/// 1g/2g/3g: 2g holds a fixed load, 3g stops at 300 and resumes at 600,
/// 1g starts at 150, stops at 450 and resumes at 750.
pub fn three_partition(gamma: f64, seed: u64) -> SimConfig {
    let layout = PartitionLayout::a100(vec![
        part("1g", "1g.10gb"),
        part("2g", "2g.20gb"),
        part("3g", "3g.40gb"),
    ])
    .expect("layout");
    let one = workload(
        "1g",
        hpc_slopes(),
        &[(150.0, 450.0), (750.0, 1000.0)],
        hpc_target(),
        1.0,
    );
    let two = workload("2g", tensor_slopes(), &[(0.0, 1000.0)], tensor_target(), 1.0);
    let three = workload("3g", hpc_slopes(), &[(0.0, 300.0), (600.0, 1000.0)], hpc_target(), 1.0);
    base(layout, vec![one, two, three], gamma, 1000.0, seed)
}

pub const PRESET_NAMES: [&str; 5] = ["reference", "linear-pair", "join", "toggle", "three-partition"];

/// Named presets for the command line.
pub fn by_name(name: &str, gamma: f64, seed: u64) -> Option<SimConfig> {
    Some(match name {
        "reference" => reference(60, 2.0, seed),
        "linear-pair" => linear_pair(gamma, 2.0, seed),
        "join" => join(gamma, seed),
        "toggle" => toggle(gamma, seed),
        "three-partition" => three_partition(gamma, seed),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::simulate;

    #[test]
    fn presets_are_valid() {
        for name in PRESET_NAMES {
            by_name(name, 0.2, 1).unwrap().validate().unwrap();
        }
        assert!(by_name("nope", 0.2, 1).is_none());
    }

    #[test]
    fn join_phase_timing() {
        let (trace, truth) = simulate(&join(0.2, 4)).unwrap();
        let first = |id: &str| {
            truth
                .samples
                .iter()
                .find(|s| s.per_partition[id] > 0.0)
                .unwrap()
                .timestamp
        };
        assert_eq!(first("2g"), 50.0);
        assert_eq!(first("3g"), JOIN_3G_START_S);
        assert_eq!(trace.len(), 900);
    }

    #[test]
    fn reference_stays_linear() {
        let cfg = reference(30, 0.0, 2);
        let (_, truth) = simulate(&cfg).unwrap();
        let max = truth.samples.iter().map(|s| s.total_active_w).fold(0.0, f64::max);
        assert!(max < cfg.workloads[0].saturation_cap_w);
    }
}
