//! Run configuration: one TOML file per run, overridden by flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use migwatt_core::attribution::IdleMode;
use migwatt_core::profiles::{MigProfile, A100_80GB_PRESET, A100_COMPUTE_SLICES};
use migwatt_core::regress::TrainerConfig;
use migwatt_core::simulator::WorkloadSpec;
use migwatt_core::{Metric, Partition, PartitionLayout, TraceFormat};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub format: Option<FormatName>,
    pub layout: Option<LayoutSpec>,
    pub simulate: SimulateSection,
    pub train: TrainSection,
    pub attribute: AttributeSection,
    pub evaluate: EvaluateSection,
    pub report: ReportSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FormatName {
    Csv,
    Jsonl,
}

impl From<FormatName> for TraceFormat {
    fn from(f: FormatName) -> Self {
        match f {
            FormatName::Csv => TraceFormat::Csv,
            FormatName::Jsonl => TraceFormat::Jsonl,
        }
    }
}

impl FormatName {
    pub fn extension(self) -> &'static str {
        match self {
            FormatName::Csv => "csv",
            FormatName::Jsonl => "jsonl",
        }
    }

    /// Format implied by a file extension.
    pub fn of_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(FormatName::Csv),
            "jsonl" | "ndjson" => Some(FormatName::Jsonl),
            _ => None,
        }
    }
}

/// Partitions by profile name within a GPU preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSpec {
    #[serde(default = "default_preset")]
    pub preset: String,
    pub partitions: Vec<PartitionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub id: String,
    pub profile: String,
    #[serde(default = "yes")]
    pub assigned: bool,
}

fn default_preset() -> String {
    A100_80GB_PRESET.to_string()
}

fn yes() -> bool {
    true
}

impl LayoutSpec {
    pub fn build(&self) -> Result<PartitionLayout> {
        if self.preset != A100_80GB_PRESET {
            bail!("unknown GPU preset `{}`", self.preset);
        }
        let parts = self
            .partitions
            .iter()
            .map(|p| {
                Ok(Partition::new(
                    p.id.clone(),
                    MigProfile::from_preset(&self.preset, &p.profile)?,
                    p.assigned,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PartitionLayout::new(parts, A100_COMPUTE_SLICES)?)
    }

    pub fn of(layout: &PartitionLayout) -> Self {
        LayoutSpec {
            preset: default_preset(),
            partitions: layout
                .partitions()
                .iter()
                .map(|p| PartitionSpec {
                    id: p.id.clone(),
                    profile: p.profile.name().to_string(),
                    assigned: p.assigned,
                })
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading layout {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing layout {}", path.display()))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    /// Named scenario; inline fields below override it.
    pub preset: Option<String>,
    pub gamma: Option<f64>,
    pub idle_power_w: Option<f64>,
    pub duration_s: Option<f64>,
    pub period_s: Option<f64>,
    pub smclk_mhz: Option<f64>,
    /// Replaces every workload's power noise.
    pub noise_sd_w: Option<f64>,
    pub workloads: Option<Vec<WorkloadSpec>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub trace: Option<PathBuf>,
    pub layout: Option<PathBuf>,
    /// Aggregate metrics used as features; all eight when absent.
    pub metrics: Option<Vec<Metric>>,
    pub trainer: Option<TrainerConfig>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    Generic,
    WorkloadSpecific,
    Online,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributeSection {
    pub trace: Option<PathBuf>,
    pub layout: Option<PathBuf>,
    pub method: Option<MethodName>,
    /// GPU-level model for the generic method.
    pub model: Option<PathBuf>,
    /// Partition id to model file, for the workload-specific method.
    pub models: BTreeMap<String, PathBuf>,
    pub scale: Option<bool>,
    pub idle: Option<IdleMode>,
    pub online: Option<OnlineSection>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineSection {
    pub trainer: Option<TrainerConfig>,
    pub metrics: Option<Vec<Metric>>,
    /// Samples per window; 0 trains one model over the whole trace.
    pub window_samples: Option<usize>,
    pub min_train_samples: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub attribution: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub layout: Option<PathBuf>,
    /// Partition whose stability is checked across `events`.
    pub fixed_partition: Option<String>,
    pub events: Vec<EventSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub time_s: f64,
    pub partition: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub attribution: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub layout: Option<PathBuf>,
    pub carbon_intensity_g_per_kwh: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
