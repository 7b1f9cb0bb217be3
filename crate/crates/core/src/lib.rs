//! Per-partition power attribution for MIG-partitioned GPUs.
//!
//! The GPU exposes one aggregate power reading; this crate splits it among
//! MIG partitions. See [`attribution`] for the estimators and
//! [`simulator`] for the synthetic GPU used to check them against known
//! per-partition power.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attribution;
pub mod energy;
pub mod error;
pub mod evaluation;
pub mod profiles;
pub mod regress;
pub mod simulator;
pub mod stats;
pub mod telemetry;

pub use attribution::{
    attribute, AttributionConfig, AttributionResult, IdleMode, IdleModel, Method, MethodKind, OnlineConfig,
};
pub use error::{Error, Result};
pub use profiles::{MigProfile, Partition, PartitionLayout};
pub use regress::{Dataset, FeatureSchema, ModelKind, PowerModel, TrainerConfig};
pub use simulator::{simulate, GroundTruth, SimConfig};
pub use telemetry::{Metric, MetricVector, TelemetrySample, Trace, TraceFormat};
