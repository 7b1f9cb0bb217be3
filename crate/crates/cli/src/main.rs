mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use commands::*;
use config::{FormatName, MethodName, RunConfig};
use migwatt_core::{Metric, ModelKind};

#[derive(Parser)]
#[command(name = "migwatt", version, about = "Attribute GPU power to MIG partitions")]
struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Trace format written by `simulate` and assumed for inputs without a
    /// recognised extension.
    #[arg(long, global = true, value_enum)]
    format: Option<FormatName>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace with per-partition ground truth.
    Simulate(SimulateCli),
    /// Fit a GPU-level power model on a trace.
    Train(TrainCli),
    /// Split measured power among partitions.
    Attribute(AttributeCli),
    /// Compare an attribution with ground truth.
    Evaluate(EvaluateCli),
    /// Per-partition energy and emissions.
    Report(ReportCli),
}

#[derive(Args)]
struct SimulateCli {
    /// One of: reference, linear-pair, join, toggle, three-partition.
    #[arg(long)]
    preset: Option<String>,
    /// Interaction coefficient in [0, 1).
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct TrainCli {
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    layout: Option<PathBuf>,
    /// ols, tree, forest or gbt.
    #[arg(long, value_parser = parse_kind)]
    kind: Option<ModelKind>,
    /// Comma-separated metric names.
    #[arg(long, value_delimiter = ',', value_parser = parse_metric)]
    metrics: Option<Vec<Metric>>,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct AttributeCli {
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    layout: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<MethodName>,
    /// GPU-level model for the generic method.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Per-partition model as ID=PATH; repeatable.
    #[arg(long = "models", value_parser = parse_assignment)]
    models: Vec<(String, PathBuf)>,
    /// Report raw estimates without scaling to measured power.
    #[arg(long, conflicts_with = "scale")]
    no_scale: bool,
    #[arg(long)]
    scale: bool,
    /// Configured idle power in watts.
    #[arg(long, conflicts_with = "idle_mode")]
    idle_watts: Option<f64>,
    /// configured, model_at_zero or trace_floor.
    #[arg(long)]
    idle_mode: Option<String>,
    /// Online window length in samples; 0 for the whole trace.
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Args)]
struct EvaluateCli {
    #[arg(long)]
    attribution: Option<PathBuf>,
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// Trace providing measured power for residual statistics.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    layout: Option<PathBuf>,
    #[arg(long)]
    fixed_partition: Option<String>,
    /// Load change as TIME:PARTITION; repeatable.
    #[arg(long = "event", value_parser = parse_event)]
    events: Vec<(f64, String)>,
}

#[derive(Args)]
struct ReportCli {
    #[arg(long)]
    attribution: Option<PathBuf>,
    /// Trace providing measured power for the GPU-level total.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    layout: Option<PathBuf>,
    /// Grams CO2e per kWh.
    #[arg(long)]
    carbon_intensity: Option<f64>,
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: migwatt_core::Error| e.to_string())
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    s.parse().map_err(|e: migwatt_core::Error| e.to_string())
}

fn parse_assignment(s: &str) -> Result<(String, PathBuf), String> {
    let (id, path) = s.split_once('=').ok_or("expected ID=PATH")?;
    Ok((id.to_string(), PathBuf::from(path)))
}

fn parse_event(s: &str) -> Result<(f64, String), String> {
    let (t, id) = s.split_once(':').ok_or("expected TIME:PARTITION")?;
    Ok((t.parse().map_err(|e| format!("bad time `{t}`: {e}"))?, id.to_string()))
}

fn run(cli: Cli) -> anyhow::Result<serde_json::Value> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let ctx = Ctx {
        seed: cli.seed.or(config.seed).unwrap_or(0),
        out_dir: cli
            .out_dir
            .or_else(|| config.out_dir.clone())
            .unwrap_or_else(|| "out".into()),
        format: cli.format.or(config.format).unwrap_or(FormatName::Csv),
        config,
    };
    match cli.command {
        Command::Simulate(a) => simulate_cmd(
            &ctx,
            SimulateArgs {
                preset: a.preset,
                gamma: a.gamma,
                duration_s: a.duration,
            },
        ),
        Command::Train(a) => train_cmd(
            &ctx,
            TrainArgs {
                trace: a.trace,
                layout: a.layout,
                kind: a.kind,
                metrics: a.metrics,
                output: a.output,
            },
        ),
        Command::Attribute(a) => attribute_cmd(
            &ctx,
            AttributeArgs {
                trace: a.trace,
                layout: a.layout,
                method: a.method,
                model: a.model,
                models: a.models,
                scale: match (a.scale, a.no_scale) {
                    (true, _) => Some(true),
                    (_, true) => Some(false),
                    _ => None,
                },
                idle_watts: a.idle_watts,
                idle_mode: a.idle_mode,
                window: a.window,
            },
        ),
        Command::Evaluate(a) => evaluate_cmd(
            &ctx,
            EvaluateArgs {
                attribution: a.attribution,
                ground_truth: a.ground_truth,
                trace: a.trace,
                layout: a.layout,
                fixed_partition: a.fixed_partition,
                events: a.events,
            },
        ),
        Command::Report(a) => report_cmd(
            &ctx,
            ReportArgs {
                attribution: a.attribution,
                trace: a.trace,
                layout: a.layout,
                carbon_intensity: a.carbon_intensity,
            },
        ),
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<migwatt_core::Error>().map(|e| e.kind()))
        .or_else(|| {
            err.chain()
                .find_map(|e| e.downcast_ref::<std::io::Error>().map(|_| "io"))
        })
        .or_else(|| {
            err.chain()
                .find_map(|e| e.downcast_ref::<toml::de::Error>().map(|_| "config"))
        })
        .unwrap_or("invalid_input")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            eprintln!("{}", json!({ "error": { "kind": "usage", "message": msg.trim() } }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let message = err.chain().map(|e| e.to_string()).collect::<Vec<_>>().join(": ");
            eprintln!(
                "{}",
                json!({ "error": { "kind": error_kind(&err), "message": message } })
            );
            ExitCode::FAILURE
        }
    }
}
