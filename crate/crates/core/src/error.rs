use std::path::PathBuf;

/// Errors produced anywhere in the attribution pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("line {line}: unknown partition id `{id}`")]
    UnknownPartition { line: u64, id: String },

    #[error("line {line}: {field} = {value} is out of range")]
    Range { line: u64, field: String, value: f64 },

    #[error("timestamp ordering violated at line {line}: {msg}")]
    Ordering { line: u64, msg: String },

    #[error("trace is empty")]
    EmptyTrace,

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid simulation config: {0}")]
    Config(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("underdetermined fit: {samples} samples for {params} parameters")]
    Underdetermined { samples: usize, params: usize },

    #[error("feature schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("metric `{metric}` missing for partition `{partition}`")]
    MissingMetric { partition: String, metric: String },

    #[error("no telemetry for assigned partition `{0}`")]
    MissingPartition(String),

    #[error("no model for assigned partition `{0}`")]
    MissingModel(String),

    #[error("measured GPU power required but absent at t={0}")]
    MissingPower(f64),

    #[error("no measured GPU power in window")]
    NoMeasuredPower,

    #[error("insufficient training samples: {have} with measured power, need {need}")]
    InsufficientSamples { have: usize, need: usize },

    #[error("no zero-utilization samples with measured power in trace")]
    NoIdleSamples,

    #[error("MAPE undefined: every reference value is zero")]
    MapeUndefined,

    #[error("timestamp mismatch: {0}")]
    TimestampMismatch(String),

    #[error("empty horizon: {0}")]
    EmptyHorizon(String),

    #[error("model format version {found} not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Stable snake_case name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidProfile(_) => "invalid_profile",
            Error::InvalidLayout(_) => "invalid_layout",
            Error::Parse { .. } => "parse",
            Error::UnknownPartition { .. } => "unknown_partition",
            Error::Range { .. } => "range",
            Error::Ordering { .. } => "ordering",
            Error::EmptyTrace => "empty_trace",
            Error::Argument(_) => "argument",
            Error::Config(_) => "config",
            Error::Dataset(_) => "dataset",
            Error::Underdetermined { .. } => "underdetermined",
            Error::SchemaMismatch(_) => "schema_mismatch",
            Error::MissingMetric { .. } => "missing_metric",
            Error::MissingPartition(_) => "missing_partition",
            Error::MissingModel(_) => "missing_model",
            Error::MissingPower(_) => "missing_power",
            Error::NoMeasuredPower => "no_measured_power",
            Error::InsufficientSamples { .. } => "insufficient_samples",
            Error::NoIdleSamples => "no_idle_samples",
            Error::MapeUndefined => "mape_undefined",
            Error::TimestampMismatch(_) => "timestamp_mismatch",
            Error::EmptyHorizon(_) => "empty_horizon",
            Error::Version { .. } => "version",
            Error::CorruptModel(_) => "corrupt_model",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
