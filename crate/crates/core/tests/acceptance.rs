//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.
//!
//! Run with `cargo test -p migwatt-core --test acceptance`.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use migwatt_core::attribution::{
    attribute, estimate_generic, gpu_dataset, normalize, split_idle, AttributionConfig, AttributionResult, IdleModel,
    Method, OnlineConfig,
};
use migwatt_core::evaluation::{compare_to_ground_truth, error_cdf, stability_shift, StabilityHorizon};
use migwatt_core::profiles::{preset_profiles, slice_fraction, A100_80GB_PRESET};
use migwatt_core::regress::{fit_gbt, fit_ols, Dataset, FeatureSchema, GbtParams, ModelParams, TrainerConfig};
use migwatt_core::simulator::scenarios::{self, A100_IDLE_W};
use migwatt_core::simulator::{simulate, GroundTruth};
use migwatt_core::telemetry::{read_trace, write_trace};
use migwatt_core::{Metric, MetricVector, Partition, PartitionLayout, PowerModel, Trace, TraceFormat};

const SEED: u64 = 3;
const GAMMA: f64 = 0.2;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn idle() -> IdleModel {
    IdleModel::configured(A100_IDLE_W).unwrap()
}

fn generic_model(noise_sd_w: f64) -> PowerModel {
    let (trace, _) = simulate(&scenarios::reference(60, noise_sd_w, SEED)).unwrap();
    fit_ols(&gpu_dataset(&trace, &Metric::ALL).unwrap()).unwrap()
}

/// Online models are trained over the whole trace.
fn online() -> Method {
    Method::Online(OnlineConfig {
        window_samples: usize::MAX,
        ..Default::default()
    })
}

fn run(trace: &Trace, method: Method, scale: bool) -> AttributionResult {
    attribute(
        trace,
        &AttributionConfig {
            method,
            idle: idle(),
            scale,
        },
    )
    .unwrap()
}

fn mapes(result: &AttributionResult, truth: &GroundTruth) -> BTreeMap<String, f64> {
    compare_to_ground_truth(result, truth)
        .unwrap()
        .per_partition
        .into_iter()
        .map(|(k, v)| (k, v.mape.expect("partition has loaded samples")))
        .collect()
}

fn fmt_map(m: &BTreeMap<String, f64>) -> String {
    m.iter()
        .map(|(k, v)| format!("{k}={v:.2}%"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn check_sums(result: &AttributionResult) -> Result<usize, String> {
    for s in &result.samples {
        let measured = s.measured_total_w.ok_or("missing measured power")?;
        let sum: f64 = s.partitions.iter().map(|p| p.total_w).sum();
        ensure!(
            (sum - measured).abs() <= 1e-6 * measured,
            "t={}: sum {sum} vs measured {measured}",
            s.timestamp
        );
    }
    Ok(result.samples.len())
}

fn layout(parts: &[(&str, &str)]) -> PartitionLayout {
    PartitionLayout::a100(
        parts
            .iter()
            .map(|(id, prof)| Partition::new(*id, migwatt_core::MigProfile::a100(prof).unwrap(), true))
            .collect(),
    )
    .unwrap()
}

fn random_metrics(rng: &mut ChaCha8Rng) -> MetricVector {
    let mut v = MetricVector::idle(rng.random_range(210.0..1410.0));
    for m in Metric::FRACTIONS {
        if rng.random_bool(0.8) {
            v.set(m, rng.random_range(0.0..=1.0)).unwrap();
        }
    }
    v
}

fn random_trace(layout: &PartitionLayout, n: usize, rng: &mut ChaCha8Rng) -> Trace {
    let samples = (0..n)
        .map(|i| {
            let mut s = migwatt_core::TelemetrySample::new(i as f64);
            for p in layout.partitions() {
                s.per_partition.insert(p.id.clone(), random_metrics(rng));
            }
            // includes readings below idle
            s.gpu_power_w = Some(rng.random_range(20.0..450.0));
            s
        })
        .collect();
    Trace::new(layout.clone(), samples, 1.0).unwrap()
}

fn c1_sum_preservation() -> Outcome {
    let generic = generic_model(2.0);
    let mut checked = 0;
    let configs = [
        scenarios::linear_pair(0.0, 2.0, SEED),
        scenarios::join(GAMMA, SEED),
        scenarios::toggle(GAMMA, SEED),
        scenarios::three_partition(GAMMA, SEED),
    ];
    for cfg in &configs {
        let (trace, _) = simulate(cfg).unwrap();
        checked += check_sums(&run(&trace, Method::Generic(generic.clone()), true))?;
        checked += check_sums(&run(&trace, online(), true))?;
        checked += check_sums(&run(&trace, Method::Online(OnlineConfig::default()), true))?;
        let per: BTreeMap<String, PowerModel> = trace
            .layout()
            .assigned()
            .map(|p| (p.id.clone(), generic.clone()))
            .collect();
        checked += check_sums(&run(&trace, Method::WorkloadSpecific(per), true))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for parts in [
        &[("a", "2g.20gb"), ("b", "3g.40gb")][..],
        &[("a", "1g.10gb"), ("b", "1g.20gb"), ("c", "4g.40gb")][..],
        &[("a", "7g.80gb")][..],
    ] {
        let trace = random_trace(&layout(parts), 400, &mut rng);
        checked += check_sums(&run(&trace, Method::Generic(generic.clone()), true))?;
    }
    Ok(format!("{checked} scaled timestamps within 1e-6 relative"))
}

fn c2_idle_split() -> Outcome {
    let l = layout(&[("2g", "2g.20gb"), ("3g", "3g.40gb")]);
    let n = l.total_assigned_slices();
    let f2 = slice_fraction(&l.get("2g").unwrap().profile, n).unwrap();
    let f3 = slice_fraction(&l.get("3g").unwrap().profile, n).unwrap();
    ensure!(f2 == Ratio::new(2, 5) && f3 == Ratio::new(3, 5), "fractions {f2} {f3}");
    let split = split_idle(&idle(), &l);
    ensure!(split.shares["2g"] == 34.0, "2g share {}", split.shares["2g"]);
    ensure!(split.shares["3g"] == 51.0, "3g share {}", split.shares["3g"]);
    ensure!(split.residual_w == 0.0, "residual {}", split.residual_w);
    Ok("85 W -> {2g: 34 W, 3g: 51 W}".into())
}

fn c3_normalization() -> Outcome {
    let profiles = preset_profiles(A100_80GB_PRESET).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut checks = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..2000 {
        let mut parts = Vec::new();
        let mut used = 0;
        while let Some(p) = {
            let p = &profiles[rng.random_range(0..profiles.len())];
            (used + p.compute_slices() <= 7 && parts.len() < 4).then_some(p)
        } {
            used += p.compute_slices();
            parts.push(Partition::new(
                format!("p{}", parts.len()),
                p.clone(),
                rng.random_bool(0.7),
            ));
        }
        if parts.is_empty() {
            continue;
        }
        let l = PartitionLayout::a100(parts).unwrap();
        let n_norm: u32 = l.partitions().iter().map(|p| p.profile.compute_slices()).sum();
        for p in l.partitions() {
            let m = random_metrics(&mut rng);
            let out = normalize(&m, &p.profile, &l);
            let k = f64::from(p.profile.compute_slices());
            for metric in Metric::ALL {
                let expect = m.get(metric).map(|x| {
                    if metric == Metric::Smclk {
                        x
                    } else {
                        x * k / f64::from(n_norm)
                    }
                });
                match (out.get(metric), expect) {
                    (Some(a), Some(b)) => {
                        worst = worst.max((a - b).abs());
                        ensure!((a - b).abs() <= 1e-12, "{metric}: {a} vs {b}");
                    }
                    (None, None) => {}
                    (a, b) => return Err(format!("{metric}: presence {a:?} vs {b:?}")),
                }
                checks += 1;
            }
        }
    }
    Ok(format!("{checks} metric values, max abs error {worst:.1e}"))
}

fn c4_ols_oracle() -> Outcome {
    let model = generic_model(0.0);
    let ModelParams::Ols {
        coefficients,
        intercept,
        ..
    } = &model.params
    else {
        return Err("expected an OLS model".into());
    };
    let slopes = scenarios::reference_slopes();
    for (name, c) in model.schema.names().iter().zip(coefficients) {
        let m: Metric = name.parse().unwrap();
        let expect = slopes.get(&m).copied().unwrap_or(0.0);
        let err = if expect == 0.0 {
            c.abs()
        } else {
            (c - expect).abs() / expect
        };
        ensure!(err <= 1e-6, "{name}: {c} vs {expect}");
    }
    ensure!(
        ((intercept - A100_IDLE_W) / A100_IDLE_W).abs() <= 1e-6,
        "intercept {intercept}"
    );

    let (trace, truth) = simulate(&scenarios::linear_pair(0.0, 0.0, SEED)).unwrap();
    let m = mapes(&run(&trace, Method::Generic(model), true), &truth);
    ensure!(m.values().all(|v| *v < 0.1), "MAPE {}", fmt_map(&m));
    Ok(format!("slopes recovered; MAPE {}", fmt_map(&m)))
}

fn c5_additive_accuracy() -> Outcome {
    let start = Instant::now();
    let model = generic_model(2.0);
    let (trace, truth) = simulate(&scenarios::linear_pair(0.0, 2.0, SEED)).unwrap();
    let m = mapes(&run(&trace, Method::Generic(model), true), &truth);
    let elapsed = start.elapsed();
    ensure!(trace.len() >= 500, "{} samples", trace.len());
    ensure!(m.values().all(|v| *v < 5.0), "MAPE {}", fmt_map(&m));
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!(
        "MAPE {} over {} samples in {:.2?}",
        fmt_map(&m),
        trace.len(),
        elapsed
    ))
}

fn c6_non_additivity() -> Outcome {
    let (trace, truth) = simulate(&scenarios::join(GAMMA, SEED)).unwrap();
    let r = run(&trace, Method::Generic(generic_model(2.0)), false);
    let (mut loaded, mut over) = (0usize, 0usize);
    for (s, t) in r.samples.iter().zip(&truth.samples) {
        if t.total_active_w > 0.0 {
            loaded += 1;
            if s.estimated_total_w > s.measured_total_w.unwrap() {
                over += 1;
            }
        }
    }
    let frac = over as f64 / loaded as f64;
    ensure!(frac > 0.9, "overestimates at {over}/{loaded}");
    Ok(format!(
        "unscaled sum exceeds measured at {over}/{loaded} loaded timestamps ({:.1}%)",
        frac * 100.0
    ))
}

/// Per-partition MAPEs of (online scaled, generic scaled, generic unscaled).
fn ordering(trace: &Trace, truth: &GroundTruth) -> Result<String, String> {
    let generic = generic_model(2.0);
    let on = mapes(&run(trace, online(), true), truth);
    let gs = mapes(&run(trace, Method::Generic(generic.clone()), true), truth);
    let gu = mapes(&run(trace, Method::Generic(generic), false), truth);
    for id in on.keys() {
        ensure!(
            on[id] < gs[id] && gs[id] < gu[id],
            "{id}: online {:.2}% generic-scaled {:.2}% generic-unscaled {:.2}%",
            on[id],
            gs[id],
            gu[id]
        );
    }
    Ok(format!(
        "online [{}] < scaled [{}] < unscaled [{}]",
        fmt_map(&on),
        fmt_map(&gs),
        fmt_map(&gu)
    ))
}

fn c7_method_ordering() -> Outcome {
    let (trace, truth) = simulate(&scenarios::join(GAMMA, SEED)).unwrap();
    ordering(&trace, &truth)
}

fn stability(trace: &Trace, events: &[f64]) -> Result<String, String> {
    let h = StabilityHorizon::default();
    let on = run(trace, online(), true);
    let gs = run(trace, Method::Generic(generic_model(2.0)), true);
    let mut parts = Vec::new();
    for &t in events {
        let a = stability_shift(&on, t, "2g", &h).unwrap();
        let b = stability_shift(&gs, t, "2g", &h).unwrap();
        ensure!(
            a < 5.0 && a < b,
            "t={t}: online shift {a:.2}% vs generic-scaled {b:.2}%"
        );
        parts.push(format!("t={t}: {a:.2}% vs {b:.2}%"));
    }
    Ok(format!("2g shift online vs generic-scaled: {}", parts.join(", ")))
}

fn c8_stability() -> Outcome {
    let (trace, _) = simulate(&scenarios::toggle(GAMMA, SEED)).unwrap();
    stability(&trace, &scenarios::TOGGLE_EVENTS_S)
}

fn c9_unscaled_independence() -> Outcome {
    let l = layout(&[("1g", "1g.10gb"), ("2g", "2g.20gb"), ("3g", "3g.40gb")]);
    let ols = generic_model(2.0);
    let (rt, _) = simulate(&scenarios::reference(20, 2.0, SEED)).unwrap();
    let gbt = fit_gbt(&gpu_dataset(&rt, &Metric::ALL).unwrap(), &GbtParams::default()).unwrap();
    let metrics = || {
        (proptest::collection::vec(0.0..=1.0f64, 7), 0.0..2000.0f64).prop_map(|(f, clk)| {
            let mut v = MetricVector::idle(clk);
            for (m, x) in Metric::FRACTIONS.into_iter().zip(f) {
                v.set(m, x).unwrap();
            }
            v
        })
    };
    let mut runner = TestRunner::new(PropConfig {
        cases: 512,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (metrics(), metrics(), metrics(), metrics(), metrics(), 0usize..3);
    let result = runner.run(&strategy, |(own, a1, a2, b1, b2, which)| {
        let ids = ["1g", "2g", "3g"];
        let own_id = ids[which];
        let others: Vec<&str> = ids.iter().copied().filter(|i| *i != own_id).collect();
        let mk = |x: &MetricVector, y: &MetricVector| {
            let mut s = migwatt_core::TelemetrySample::new(0.0);
            s.per_partition.insert(own_id.into(), own);
            s.per_partition.insert(others[0].into(), *x);
            s.per_partition.insert(others[1].into(), *y);
            s
        };
        for model in [&ols, &gbt] {
            let e1 = estimate_generic(model, &mk(&a1, &a2), &l, &idle()).unwrap();
            let e2 = estimate_generic(model, &mk(&b1, &b2), &l, &idle()).unwrap();
            prop_assert_eq!(e1.active[own_id].to_bits(), e2.active[own_id].to_bits());
        }
        Ok(())
    });
    result.map_err(|e| e.to_string())?;
    Ok("512 cases, OLS and GBT estimates bit-identical".into())
}

fn c10_training_budget() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (n, d) = (7435, 24);
    let names: Vec<String> = (0..d)
        .map(|j| format!("p{}.{}", j / 8, Metric::ALL[j % 8].name()))
        .collect();
    let mut values = Vec::with_capacity(n * d);
    let mut targets = Vec::with_capacity(n);
    let w: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..200.0)).collect();
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        targets.push(85.0 + row.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() + rng.random_range(-2.0..2.0));
        values.extend(row);
    }
    let data = Dataset::new(FeatureSchema::new(names).unwrap(), values, targets).unwrap();
    let t = Instant::now();
    fit_ols(&data).unwrap();
    let ols = t.elapsed();
    let params = GbtParams {
        n_estimators: 100,
        max_depth: 3,
        ..GbtParams::default()
    };
    let t = Instant::now();
    fit_gbt(&data, &params).unwrap();
    let gbt = t.elapsed();
    ensure!(ols < Duration::from_millis(50), "OLS took {ols:?}");
    ensure!(gbt < Duration::from_secs(5), "GBT took {gbt:?}");
    Ok(format!("OLS {ols:.2?}, GBT(100 x depth 3) {gbt:.2?} on {n} x {d}"))
}

fn c11_three_partition() -> Outcome {
    let start = Instant::now();
    let (trace, truth) = simulate(&scenarios::three_partition(GAMMA, SEED)).unwrap();
    let generic = generic_model(2.0);
    let n1 = check_sums(&run(&trace, Method::Generic(generic), true))? + check_sums(&run(&trace, online(), true))?;
    let ord = ordering(&trace, &truth)?;
    let stab = stability(&trace, &scenarios::THREE_PARTITION_EVENTS_S)?;
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("{n1} sums ok; {ord}; {stab}; {elapsed:.2?}"))
}

fn c12_round_trips() -> Outcome {
    let (trace, _) = simulate(&scenarios::three_partition(GAMMA, SEED)).unwrap();
    for format in [TraceFormat::Csv, TraceFormat::Jsonl] {
        let mut buf = Vec::new();
        write_trace(&trace, &mut buf, format).unwrap();
        let back = read_trace(&buf[..], trace.layout(), format, trace.period_s()).unwrap();
        ensure!(back == trace, "{format:?} trace round-trip differs");
    }
    let (rt, _) = simulate(&scenarios::reference(15, 2.0, SEED)).unwrap();
    let data = gpu_dataset(&rt, &Metric::ALL).unwrap();
    let mut kinds = Vec::new();
    for kind in ["ols", "tree", "forest", "gbt"] {
        let mut cfg = TrainerConfig::with_kind(kind.parse().unwrap());
        cfg.forest.n_trees = 10;
        let model = cfg.fit(&data).unwrap();
        let back = PowerModel::from_json(&model.to_json()).unwrap();
        ensure!(back == model, "{kind} model differs after round-trip");
        for row in data.rows() {
            ensure!(
                back.predict(row).unwrap().to_bits() == model.predict(row).unwrap().to_bits(),
                "{kind} prediction differs"
            );
        }
        kinds.push(kind);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for _ in 0..200 {
        let n = rng.random_range(1..60);
        // coarse values force ties
        let errs: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..20u32)) * 0.5).collect();
        let cdf = error_cdf(&errs).unwrap();
        let mut distinct = errs.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        ensure!(
            cdf.len() == distinct.len(),
            "CDF has {} points for {} distinct values",
            cdf.len(),
            distinct.len()
        );
        for ((x, f), d) in cdf.iter().zip(&distinct) {
            let rank = errs.iter().filter(|e| **e <= *d).count();
            ensure!(
                x == d && *f == rank as f64 / n as f64,
                "CDF point ({x}, {f}) vs rank oracle"
            );
        }
    }
    Ok(format!("CSV and JSONL traces, {} models, 200 CDFs", kinds.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("sum preservation", c1_sum_preservation),
        ("idle split identity", c2_idle_split),
        ("normalization identity", c3_normalization),
        ("OLS oracle", c4_ols_oracle),
        ("additive-case accuracy", c5_additive_accuracy),
        ("non-additivity reproduction", c6_non_additivity),
        ("method ordering", c7_method_ordering),
        ("stability", c8_stability),
        ("unscaled independence", c9_unscaled_independence),
        ("training budget", c10_training_budget),
        ("three-partition scenario", c11_three_partition),
        ("format round-trips", c12_round_trips),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
