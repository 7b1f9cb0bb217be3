//! MIG partition geometry.
//!
//! A partition with `k` compute slices is a "kG" partition. Two different
//! denominators appear during attribution: the slice count over partitions
//! that have work assigned (used to split idle power) and the slice count
//! over every created partition (used to normalize utilization metrics).

use std::collections::HashSet;
use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VALID_COMPUTE_SLICES: [u32; 5] = [1, 2, 3, 4, 7];
pub const VALID_MEMORY_SLICES: [u32; 4] = [1, 2, 4, 8];

/// Compute slices on an A100.
pub const A100_COMPUTE_SLICES: u32 = 7;

/// Name of the built-in A100-80GB profile table.
pub const A100_80GB_PRESET: &str = "a100-80gb";

const A100_80GB: [(&str, u32, u32); 6] = [
    ("1g.10gb", 1, 1),
    ("1g.20gb", 1, 2),
    ("2g.20gb", 2, 2),
    ("3g.40gb", 3, 4),
    ("4g.40gb", 4, 4),
    ("7g.80gb", 7, 8),
];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawProfile", into = "RawProfile")]
pub struct MigProfile {
    name: String,
    compute_slices: u32,
    memory_slices: u32,
}

#[derive(Serialize, Deserialize)]
struct RawProfile {
    name: String,
    compute_slices: u32,
    memory_slices: u32,
}

impl TryFrom<RawProfile> for MigProfile {
    type Error = Error;
    fn try_from(r: RawProfile) -> Result<Self> {
        MigProfile::new(r.name, r.compute_slices, r.memory_slices)
    }
}

impl From<MigProfile> for RawProfile {
    fn from(p: MigProfile) -> Self {
        RawProfile {
            name: p.name,
            compute_slices: p.compute_slices,
            memory_slices: p.memory_slices,
        }
    }
}

impl MigProfile {
    pub fn new(name: impl Into<String>, compute_slices: u32, memory_slices: u32) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::InvalidProfile("empty profile name".into()));
        }
        if !VALID_COMPUTE_SLICES.contains(&compute_slices) {
            return Err(Error::InvalidProfile(format!(
                "{name}: compute_slices {compute_slices} not in {VALID_COMPUTE_SLICES:?}"
            )));
        }
        if !VALID_MEMORY_SLICES.contains(&memory_slices) {
            return Err(Error::InvalidProfile(format!(
                "{name}: memory_slices {memory_slices} not in {VALID_MEMORY_SLICES:?}"
            )));
        }
        Ok(MigProfile {
            name,
            compute_slices,
            memory_slices,
        })
    }

    /// Looks up a profile in a built-in preset table.
    pub fn from_preset(preset: &str, name: &str) -> Result<Self> {
        preset_profiles(preset)?
            .into_iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::InvalidProfile(format!("`{name}` is not in preset `{preset}`")))
    }

    /// Looks up a profile in the A100-80GB table.
    pub fn a100(name: &str) -> Result<Self> {
        Self::from_preset(A100_80GB_PRESET, name)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn compute_slices(&self) -> u32 {
        self.compute_slices
    }

    pub fn memory_slices(&self) -> u32 {
        self.memory_slices
    }
}

impl fmt::Display for MigProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Returns every profile of a named preset table.
pub fn preset_profiles(preset: &str) -> Result<Vec<MigProfile>> {
    match preset {
        A100_80GB_PRESET => Ok(A100_80GB
            .iter()
            .map(|&(n, k, m)| MigProfile::new(n, k, m).expect("built-in profile"))
            .collect()),
        other => Err(Error::InvalidProfile(format!("unknown preset `{other}`"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub id: String,
    pub profile: MigProfile,
    pub assigned: bool,
}

impl Partition {
    pub fn new(id: impl Into<String>, profile: MigProfile, assigned: bool) -> Self {
        Partition {
            id: id.into(),
            profile,
            assigned,
        }
    }

    pub fn compute_slices(&self) -> u32 {
        self.profile.compute_slices()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLayout", into = "RawLayout")]
pub struct PartitionLayout {
    partitions: Vec<Partition>,
    gpu_total_compute_slices: u32,
}

#[derive(Serialize, Deserialize)]
struct RawLayout {
    partitions: Vec<Partition>,
    gpu_total_compute_slices: u32,
}

impl TryFrom<RawLayout> for PartitionLayout {
    type Error = Error;
    fn try_from(r: RawLayout) -> Result<Self> {
        PartitionLayout::new(r.partitions, r.gpu_total_compute_slices)
    }
}

impl From<PartitionLayout> for RawLayout {
    fn from(l: PartitionLayout) -> Self {
        RawLayout {
            partitions: l.partitions,
            gpu_total_compute_slices: l.gpu_total_compute_slices,
        }
    }
}

impl PartitionLayout {
    pub fn new(partitions: Vec<Partition>, gpu_total_compute_slices: u32) -> Result<Self> {
        let mut seen = HashSet::new();
        for p in &partitions {
            if p.id.is_empty() {
                return Err(Error::InvalidLayout("empty partition id".into()));
            }
            if p.id == crate::telemetry::GPU_ENTITY {
                return Err(Error::InvalidLayout(format!(
                    "partition id `{}` is reserved for aggregate rows",
                    p.id
                )));
            }
            if !seen.insert(p.id.as_str()) {
                return Err(Error::InvalidLayout(format!("duplicate partition id `{}`", p.id)));
            }
        }
        let used: u32 = partitions.iter().map(Partition::compute_slices).sum();
        if used > gpu_total_compute_slices {
            return Err(Error::InvalidLayout(format!(
                "partitions use {used} compute slices but the GPU has {gpu_total_compute_slices}"
            )));
        }
        Ok(PartitionLayout {
            partitions,
            gpu_total_compute_slices,
        })
    }

    /// Layout on an A100 (7 compute slices).
    pub fn a100(partitions: Vec<Partition>) -> Result<Self> {
        Self::new(partitions, A100_COMPUTE_SLICES)
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn assigned(&self) -> impl Iterator<Item = &Partition> {
        self.partitions.iter().filter(|p| p.assigned)
    }

    pub fn get(&self, id: &str) -> Option<&Partition> {
        self.partitions.iter().find(|p| p.id == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.get(id).is_some()
    }

    pub fn gpu_total_compute_slices(&self) -> u32 {
        self.gpu_total_compute_slices
    }

    /// Slices over partitions with job assignments; the idle-split denominator.
    pub fn total_assigned_slices(&self) -> u32 {
        self.assigned().map(Partition::compute_slices).sum()
    }

    /// Slices over every created partition; the normalization denominator.
    pub fn total_layout_slices(&self) -> u32 {
        self.partitions.iter().map(Partition::compute_slices).sum()
    }
}

/// `k / denominator` as an exact rational.
pub fn slice_fraction(profile: &MigProfile, denominator: u32) -> Result<Ratio<u32>> {
    if denominator == 0 {
        return Err(Error::InvalidLayout("slice denominator is zero".into()));
    }
    if denominator < profile.compute_slices() {
        return Err(Error::InvalidLayout(format!(
            "denominator {denominator} smaller than {} compute slices of {}",
            profile.compute_slices(),
            profile.name()
        )));
    }
    Ok(Ratio::new(profile.compute_slices(), denominator))
}
