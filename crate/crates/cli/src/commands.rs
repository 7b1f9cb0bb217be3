use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use migwatt_core::attribution::{
    attach_measurements, attribute, estimate_idle, gpu_dataset, load_attribution_csv, save_attribution_csv,
    AttributionConfig, IdleMode, Method, OnlineConfig,
};
use migwatt_core::energy::energy_report;
use migwatt_core::evaluation::ResidualStats;
use migwatt_core::evaluation::{
    compare_to_ground_truth, error_cdf, partition_errors, stability_report, write_cdf_csv, StabilityHorizon,
};
use migwatt_core::regress::{evaluate_fit, TrainerConfig};
use migwatt_core::simulator::scenarios::{self, A100_IDLE_W};
use migwatt_core::simulator::{load_ground_truth, save_ground_truth, simulate, SimConfig, DEFAULT_SMCLK_MHZ};
use migwatt_core::telemetry::{ingest_trace, save_trace};
use migwatt_core::{Metric, ModelKind, PowerModel, Trace};

use crate::config::{FormatName, LayoutSpec, MethodName, RunConfig};

pub const LAYOUT_FILE: &str = "layout.toml";

/// Settings shared by every subcommand after merging flags over config.
pub struct Ctx {
    pub config: RunConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub format: FormatName,
}

impl Ctx {
    fn output(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        Ok(self.out_dir.join(name))
    }

    /// Layout for a trace: explicit file, then the config's `[layout]`,
    /// then `layout.toml` beside the trace.
    fn layout_for(&self, explicit: Option<&Path>, trace: &Path) -> Result<migwatt_core::PartitionLayout> {
        if let Some(p) = explicit {
            return LayoutSpec::load(p)?.build();
        }
        if let Some(spec) = &self.config.layout {
            return spec.build();
        }
        let beside = trace.parent().unwrap_or(Path::new(".")).join(LAYOUT_FILE);
        if beside.exists() {
            return LayoutSpec::load(&beside)?.build();
        }
        bail!(
            "no layout for {}: pass --layout, add [layout] to the config, or place {LAYOUT_FILE} beside the trace",
            trace.display()
        )
    }

    fn load_trace(&self, path: &Path, layout: Option<&Path>) -> Result<Trace> {
        let layout = self.layout_for(layout, path)?;
        let format = FormatName::of_path(path).unwrap_or(self.format);
        Ok(ingest_trace(path, &layout, format.into(), 1.0)?)
    }
}

fn required<T: Clone>(flag: Option<T>, section: &Option<T>, what: &str) -> Result<T> {
    flag.or_else(|| section.clone())
        .ok_or_else(|| anyhow!("missing {what}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub struct SimulateArgs {
    pub preset: Option<String>,
    pub gamma: Option<f64>,
    pub duration_s: Option<f64>,
}

pub fn simulate_cmd(ctx: &Ctx, args: SimulateArgs) -> Result<serde_json::Value> {
    let sec = &ctx.config.simulate;
    let gamma = args.gamma.or(sec.gamma);
    let mut cfg = match args.preset.or_else(|| sec.preset.clone()) {
        Some(name) => scenarios::by_name(&name, gamma.unwrap_or(0.2), ctx.seed).ok_or_else(|| {
            anyhow!(
                "unknown preset `{name}` (expected one of: {})",
                scenarios::PRESET_NAMES.join(", ")
            )
        })?,
        None => {
            let layout = ctx
                .config
                .layout
                .as_ref()
                .ok_or_else(|| anyhow!("simulate needs --preset or a [layout] section"))?
                .build()?;
            SimConfig {
                layout,
                workloads: Vec::new(),
                idle_power_w: A100_IDLE_W,
                interaction_gamma: 0.0,
                duration_s: args
                    .duration_s
                    .or(sec.duration_s)
                    .ok_or_else(|| anyhow!("missing simulate.duration_s"))?,
                period_s: 1.0,
                seed: ctx.seed,
                smclk_mhz: DEFAULT_SMCLK_MHZ,
            }
        }
    };
    if let Some(layout) = &ctx.config.layout {
        if sec.preset.is_none() {
            cfg.layout = layout.build()?;
        }
    }
    if let Some(g) = gamma {
        cfg.interaction_gamma = g;
    }
    if let Some(w) = &sec.workloads {
        cfg.workloads = w.clone();
    }
    cfg.idle_power_w = sec.idle_power_w.unwrap_or(cfg.idle_power_w);
    cfg.duration_s = args.duration_s.or(sec.duration_s).unwrap_or(cfg.duration_s);
    cfg.period_s = sec.period_s.unwrap_or(cfg.period_s);
    cfg.smclk_mhz = sec.smclk_mhz.unwrap_or(cfg.smclk_mhz);
    cfg.seed = ctx.seed;
    if let Some(sd) = sec.noise_sd_w {
        cfg.workloads.iter_mut().for_each(|w| w.noise_sd_w = sd);
    }

    let (trace, truth) = simulate(&cfg)?;
    let trace_path = ctx.output(&format!("trace.{}", ctx.format.extension()))?;
    save_trace(&trace, &trace_path, ctx.format.into())?;
    let truth_path = ctx.output("ground_truth.csv")?;
    save_ground_truth(&truth, &truth_path)?;
    let layout_path = ctx.output(LAYOUT_FILE)?;
    fs::write(&layout_path, toml::to_string(&LayoutSpec::of(&cfg.layout))?)
        .with_context(|| format!("writing {}", layout_path.display()))?;
    let sim_path = ctx.output("simulation.json")?;
    write_json(&sim_path, &cfg)?;
    Ok(json!({
        "trace": trace_path,
        "ground_truth": truth_path,
        "layout": layout_path,
        "simulation": sim_path,
        "samples": trace.len(),
    }))
}

pub struct TrainArgs {
    pub trace: Option<PathBuf>,
    pub layout: Option<PathBuf>,
    pub kind: Option<ModelKind>,
    pub metrics: Option<Vec<Metric>>,
    pub output: Option<PathBuf>,
}

pub fn train_cmd(ctx: &Ctx, args: TrainArgs) -> Result<serde_json::Value> {
    let sec = &ctx.config.train;
    let trace_path = required(args.trace, &sec.trace, "training trace (--trace or train.trace)")?;
    let trace = ctx.load_trace(&trace_path, args.layout.as_deref().or(sec.layout.as_deref()))?;
    let metrics = args
        .metrics
        .or_else(|| sec.metrics.clone())
        .unwrap_or(Metric::ALL.to_vec());
    let mut trainer = sec.trainer.clone().unwrap_or_default();
    if let Some(kind) = args.kind {
        trainer.kind = kind;
    }
    trainer.forest.seed = ctx.seed;
    let data = gpu_dataset(&trace, &metrics)?;
    let model = trainer.fit(&data)?;
    let fit = evaluate_fit(&model, &data).ok();
    let path = match args.output.or_else(|| sec.output.clone()) {
        Some(p) => p,
        None => ctx.output("model.json")?,
    };
    model.save(&path)?;
    Ok(json!({
        "model": path,
        "kind": model.kind(),
        "n_samples": model.training_meta.n_samples,
        "train_seconds": model.training_meta.train_seconds,
        "fit": fit,
    }))
}

pub struct AttributeArgs {
    pub trace: Option<PathBuf>,
    pub layout: Option<PathBuf>,
    pub method: Option<MethodName>,
    pub model: Option<PathBuf>,
    pub models: Vec<(String, PathBuf)>,
    pub scale: Option<bool>,
    pub idle_watts: Option<f64>,
    pub idle_mode: Option<String>,
    pub window: Option<usize>,
}

pub fn attribute_cmd(ctx: &Ctx, args: AttributeArgs) -> Result<serde_json::Value> {
    let sec = &ctx.config.attribute;
    let trace_path = required(args.trace, &sec.trace, "trace (--trace or attribute.trace)")?;
    let trace = ctx.load_trace(&trace_path, args.layout.as_deref().or(sec.layout.as_deref()))?;
    let method_name = args.method.or(sec.method).unwrap_or(MethodName::Generic);
    let scale = args.scale.or(sec.scale).unwrap_or(true);

    let idle_mode = match (args.idle_watts, args.idle_mode.as_deref()) {
        (Some(watts), _) => IdleMode::Configured { watts },
        (None, Some("model_at_zero" | "model-at-zero")) => IdleMode::ModelAtZero,
        (None, Some("trace_floor" | "trace-floor")) => IdleMode::TraceFloor,
        (None, Some("configured")) => IdleMode::Configured { watts: A100_IDLE_W },
        (None, Some(other)) => bail!("unknown idle mode `{other}`"),
        (None, None) => sec.idle.unwrap_or(IdleMode::Configured { watts: A100_IDLE_W }),
    };

    let (method, idle_model) = match method_name {
        MethodName::Generic => {
            let path = required(args.model, &sec.model, "model (--model or attribute.model)")?;
            let model = PowerModel::load(&path)?;
            let idle = estimate_idle(idle_mode, Some(&model), Some(&trace))?;
            (Method::Generic(model), idle)
        }
        MethodName::WorkloadSpecific => {
            let mut paths = sec.models.clone();
            paths.extend(args.models);
            if paths.is_empty() {
                bail!("workload-specific attribution needs --models ID=PATH or [attribute.models]");
            }
            let models = paths
                .iter()
                .map(|(id, p)| Ok((id.clone(), PowerModel::load(p)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            if matches!(idle_mode, IdleMode::ModelAtZero) {
                bail!("model_at_zero idle is ambiguous with several models; use configured or trace_floor");
            }
            let idle = estimate_idle(idle_mode, None, Some(&trace))?;
            (Method::WorkloadSpecific(models), idle)
        }
        MethodName::Online => {
            let o = sec.online.clone().unwrap_or_default();
            let defaults = OnlineConfig::default();
            let window = args.window.or(o.window_samples).unwrap_or(defaults.window_samples);
            let mut trainer: TrainerConfig = o.trainer.unwrap_or(defaults.trainer);
            trainer.forest.seed = ctx.seed;
            let cfg = OnlineConfig {
                trainer,
                metrics: o.metrics.unwrap_or(defaults.metrics),
                window_samples: if window == 0 { usize::MAX } else { window },
                min_train_samples: o.min_train_samples.unwrap_or(defaults.min_train_samples),
            };
            if matches!(idle_mode, IdleMode::ModelAtZero) {
                bail!("model_at_zero idle needs a pre-trained model; online attribution has none");
            }
            let idle = estimate_idle(idle_mode, None, Some(&trace))?;
            (Method::Online(cfg), idle)
        }
    };

    let result = attribute(
        &trace,
        &AttributionConfig {
            method,
            idle: idle_model,
            scale,
        },
    )?;
    let csv_path = ctx.output("attribution.csv")?;
    save_attribution_csv(&result, &csv_path)?;
    let summary = json!({
        "method": result.method,
        "scaled": result.scaled,
        "idle_power_w": idle_model.idle_power_w,
        "idle_source": idle_model.source,
        "samples": result.samples.len(),
        "clamp_count": result.clamp_count,
        "fallback_count": result.fallback_count,
        "models_trained": result.models_trained,
        "residual": ResidualStats::of(&result),
    });
    let summary_path = ctx.output("attribution_summary.json")?;
    write_json(&summary_path, &summary)?;
    Ok(json!({ "attribution": csv_path, "summary": summary_path }))
}

pub struct EvaluateArgs {
    pub attribution: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub layout: Option<PathBuf>,
    pub fixed_partition: Option<String>,
    pub events: Vec<(f64, String)>,
}

pub fn evaluate_cmd(ctx: &Ctx, args: EvaluateArgs) -> Result<serde_json::Value> {
    let sec = &ctx.config.evaluate;
    let attribution = required(args.attribution, &sec.attribution, "attribution (--attribution)")?;
    let truth_path = required(args.ground_truth, &sec.ground_truth, "ground truth (--ground-truth)")?;
    let mut result = load_attribution_csv(&attribution)?;
    if let Some(trace_path) = args.trace.or_else(|| sec.trace.clone()) {
        let trace = ctx.load_trace(&trace_path, args.layout.as_deref().or(sec.layout.as_deref()))?;
        attach_measurements(&mut result, &trace)?;
    }
    let truth = load_ground_truth(&truth_path)?;
    let mut report = compare_to_ground_truth(&result, &truth)?;

    let mut events: Vec<(f64, String)> = sec.events.iter().map(|e| (e.time_s, e.partition.clone())).collect();
    events.extend(args.events);
    if !events.is_empty() {
        let fixed = args
            .fixed_partition
            .or_else(|| sec.fixed_partition.clone())
            .ok_or_else(|| anyhow!("stability events need --fixed-partition"))?;
        report.stability = stability_report(&result, &events, &fixed, &StabilityHorizon::default())?;
    }

    let errors: Vec<f64> = result
        .partition_ids()
        .iter()
        .flat_map(|id| partition_errors(&result, &truth, id))
        .collect();
    let report_path = ctx.output("eval_report.json")?;
    write_json(&report_path, &report)?;
    let mut out = json!({ "report": report_path, "mean_mape": report.mean_mape });
    if !errors.is_empty() {
        let cdf_path = ctx.output("error_cdf.csv")?;
        let f = fs::File::create(&cdf_path).with_context(|| format!("writing {}", cdf_path.display()))?;
        write_cdf_csv(&error_cdf(&errors)?, std::io::BufWriter::new(f))?;
        out["cdf"] = json!(cdf_path);
    }
    Ok(out)
}

pub struct ReportArgs {
    pub attribution: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub layout: Option<PathBuf>,
    pub carbon_intensity: Option<f64>,
}

pub fn report_cmd(ctx: &Ctx, args: ReportArgs) -> Result<serde_json::Value> {
    let sec = &ctx.config.report;
    let attribution = required(args.attribution, &sec.attribution, "attribution (--attribution)")?;
    let intensity = required(
        args.carbon_intensity,
        &sec.carbon_intensity_g_per_kwh,
        "carbon intensity (--carbon-intensity)",
    )?;
    let mut result = load_attribution_csv(&attribution)?;
    if let Some(trace_path) = args.trace.or_else(|| sec.trace.clone()) {
        let trace = ctx.load_trace(&trace_path, args.layout.as_deref().or(sec.layout.as_deref()))?;
        attach_measurements(&mut result, &trace)?;
    }
    let report = energy_report(&result, intensity)?;
    let path = ctx.output("energy_report.json")?;
    write_json(&path, &report)?;
    Ok(json!({ "report": path, "attributed_kwh": report.attributed_kwh }))
}
