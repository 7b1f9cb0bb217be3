//! Utilization-to-power regressors.
//!
//! Four model families share one [`PowerModel`] type: ordinary least squares,
//! a CART regression tree, a bagged random forest, and squared-loss gradient
//! boosting. All trainers are deterministic for a fixed seed.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{abs_pct_errors, Percentiles};
use crate::telemetry::Metric;

mod forest;
mod gbt;
mod ols;
mod tree;

pub use forest::{fit_forest, ForestParams};
pub use gbt::{fit_gbt, GbtParams};
pub use ols::fit_ols;
pub use tree::{fit_tree, Node, Tree, TreeParams};

/// Version written into model files.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Ordered feature names. A bare metric name (`fp32a`) is a GPU-level
/// feature; `<partition>.<metric>` is a per-partition feature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct FeatureSchema(Vec<String>);

impl TryFrom<Vec<String>> for FeatureSchema {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        FeatureSchema::new(v)
    }
}

impl From<FeatureSchema> for Vec<String> {
    fn from(s: FeatureSchema) -> Self {
        s.0
    }
}

impl FeatureSchema {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::SchemaMismatch("feature schema is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if n.is_empty() || !seen.insert(n.as_str()) {
                return Err(Error::SchemaMismatch(format!("empty or duplicate feature `{n}`")));
            }
        }
        Ok(FeatureSchema(names))
    }

    /// GPU-level schema over the given metrics.
    pub fn metrics(metrics: &[Metric]) -> Result<Self> {
        Self::new(metrics.iter().map(|m| m.name().to_string()).collect())
    }

    /// Default GPU-level schema: all eight metrics.
    pub fn default_metrics() -> Self {
        Self::metrics(&Metric::ALL).expect("non-empty")
    }

    /// One column per (partition, metric) pair, partition-major.
    pub fn per_partition<'a>(ids: impl IntoIterator<Item = &'a str>, metrics: &[Metric]) -> Result<Self> {
        let names = ids
            .into_iter()
            .flat_map(|id| metrics.iter().map(move |m| format!("{id}.{m}")))
            .collect();
        Self::new(names)
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Resolves each name to `(partition, metric)`; partition is `None` for
    /// GPU-level names.
    pub fn resolve(&self) -> Result<Vec<(Option<&str>, Metric)>> {
        self.0
            .iter()
            .map(|n| match n.rsplit_once('.') {
                Some((p, m)) => Ok((Some(p), m.parse()?)),
                None => Ok((None, n.parse()?)),
            })
            .collect()
    }

    /// True when every feature is GPU-level.
    pub fn is_aggregate(&self) -> bool {
        self.0.iter().all(|n| !n.contains('.'))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: FeatureSchema,
    /// Row-major, `n_samples * schema.len()`.
    values: Vec<f64>,
    targets: Vec<f64>,
}

impl Dataset {
    pub fn new(schema: FeatureSchema, values: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        let d = schema.len();
        if targets.is_empty() {
            return Err(Error::Dataset("no samples".into()));
        }
        if values.len() != d * targets.len() {
            return Err(Error::Dataset(format!(
                "{} values for {} rows of width {d}",
                values.len(),
                targets.len()
            )));
        }
        if values.iter().chain(&targets).any(|x| !x.is_finite()) {
            return Err(Error::Dataset("non-finite value".into()));
        }
        Ok(Dataset {
            schema,
            values,
            targets,
        })
    }

    pub fn from_rows(schema: FeatureSchema, rows: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        let d = schema.len();
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::Dataset(format!("row width {} != schema width {d}", r.len())));
        }
        Self::new(schema, rows.concat(), targets)
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn n_samples(&self) -> usize {
        self.targets.len()
    }

    pub fn n_features(&self) -> usize {
        self.schema.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_features();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_features())
    }

    pub(crate) fn value(&self, row: usize, feature: usize) -> f64 {
        self.values[row * self.n_features() + feature]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub n_samples: usize,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelParams {
    Ols {
        coefficients: Vec<f64>,
        intercept: f64,
        rank: usize,
    },
    Tree {
        tree: Tree,
    },
    Forest {
        trees: Vec<Tree>,
    },
    Gbt {
        base_score: f64,
        learning_rate: f64,
        trees: Vec<Tree>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ols,
    Tree,
    Forest,
    Gbt,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ols" | "lr" => Ok(ModelKind::Ols),
            "tree" | "cart" => Ok(ModelKind::Tree),
            "forest" | "rf" => Ok(ModelKind::Forest),
            "gbt" | "xgb" | "gb" => Ok(ModelKind::Gbt),
            _ => Err(Error::Argument(format!("unknown model kind `{s}`"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Ols => "ols",
            ModelKind::Tree => "tree",
            ModelKind::Forest => "forest",
            ModelKind::Gbt => "gbt",
        })
    }
}

/// Hyperparameters for every model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub kind: ModelKind,
    pub tree: TreeParams,
    pub forest: ForestParams,
    pub gbt: GbtParams,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            kind: ModelKind::Ols,
            tree: TreeParams::default(),
            forest: ForestParams::default(),
            gbt: GbtParams::default(),
        }
    }
}

impl TrainerConfig {
    pub fn with_kind(kind: ModelKind) -> Self {
        TrainerConfig {
            kind,
            ..Default::default()
        }
    }

    pub fn fit(&self, data: &Dataset) -> Result<PowerModel> {
        match self.kind {
            ModelKind::Ols => fit_ols(data),
            ModelKind::Tree => fit_tree(data, &self.tree),
            ModelKind::Forest => fit_forest(data, &self.forest),
            ModelKind::Gbt => fit_gbt(data, &self.gbt),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerModel {
    pub format_version: u32,
    pub schema: FeatureSchema,
    #[serde(flatten)]
    pub params: ModelParams,
    pub training_meta: TrainingMeta,
}

impl PowerModel {
    pub(crate) fn timed(data: &Dataset, fit: impl FnOnce() -> Result<ModelParams>) -> Result<PowerModel> {
        let start = Instant::now();
        let params = fit()?;
        Ok(PowerModel {
            format_version: MODEL_FORMAT_VERSION,
            schema: data.schema().clone(),
            params,
            training_meta: TrainingMeta {
                n_samples: data.n_samples(),
                train_seconds: start.elapsed().as_secs_f64(),
            },
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self.params {
            ModelParams::Ols { .. } => ModelKind::Ols,
            ModelParams::Tree { .. } => ModelKind::Tree,
            ModelParams::Forest { .. } => ModelKind::Forest,
            ModelParams::Gbt { .. } => ModelKind::Gbt,
        }
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn predict(&self, row: &[f64]) -> Result<f64> {
        if row.len() != self.schema.len() {
            return Err(Error::SchemaMismatch(format!(
                "row has {} features, model expects {}",
                row.len(),
                self.schema.len()
            )));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::SchemaMismatch("non-finite feature value".into()));
        }
        Ok(self.predict_unchecked(row))
    }

    pub(crate) fn predict_unchecked(&self, row: &[f64]) -> f64 {
        match &self.params {
            ModelParams::Ols {
                coefficients,
                intercept,
                ..
            } => intercept + coefficients.iter().zip(row).map(|(c, x)| c * x).sum::<f64>(),
            ModelParams::Tree { tree } => tree.predict(row),
            ModelParams::Forest { trees } => trees.iter().map(|t| t.predict(row)).sum::<f64>() / trees.len() as f64,
            ModelParams::Gbt {
                base_score,
                learning_rate,
                trees,
            } => base_score + learning_rate * trees.iter().map(|t| t.predict(row)).sum::<f64>(),
        }
    }

    /// Predicts every row of a dataset with this model's schema.
    pub fn predict_dataset(&self, data: &Dataset) -> Result<Vec<f64>> {
        if data.schema() != &self.schema {
            return Err(Error::SchemaMismatch("dataset schema differs from model schema".into()));
        }
        Ok(data.rows().map(|r| self.predict_unchecked(r)).collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::CorruptModel(e.to_string()))?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::CorruptModel("missing format_version".into()))?;
        if found != u64::from(MODEL_FORMAT_VERSION) {
            return Err(Error::Version {
                found: found as u32,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let model: PowerModel = serde_json::from_value(value).map_err(|e| Error::CorruptModel(e.to_string()))?;
        model.check()?;
        Ok(model)
    }

    fn check(&self) -> Result<()> {
        let d = self.schema.len();
        let trees: &[Tree] = match &self.params {
            ModelParams::Ols { coefficients, .. } => {
                return if coefficients.len() == d {
                    Ok(())
                } else {
                    Err(Error::CorruptModel("coefficient count differs from schema".into()))
                };
            }
            ModelParams::Tree { tree } => std::slice::from_ref(tree),
            ModelParams::Forest { trees } | ModelParams::Gbt { trees, .. } => trees,
        };
        if matches!(self.params, ModelParams::Forest { .. }) && trees.is_empty() {
            return Err(Error::CorruptModel("forest without trees".into()));
        }
        trees.iter().try_for_each(|t| t.check(d).map_err(Error::CorruptModel))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub n_samples: usize,
    /// Rows with zero target, left out of the percentage errors.
    pub n_zero_targets: usize,
    pub mape: f64,
    pub mae_w: f64,
    pub error_percentiles: Percentiles,
}

/// In-sample or held-out accuracy of a model.
pub fn evaluate_fit(model: &PowerModel, data: &Dataset) -> Result<FitReport> {
    let preds = model.predict_dataset(data)?;
    let (errs, zeros) = abs_pct_errors(preds.iter().copied().zip(data.targets().iter().copied()));
    let Some(error_percentiles) = Percentiles::of(&errs) else {
        return Err(Error::MapeUndefined);
    };
    let mae_w = preds
        .iter()
        .zip(data.targets())
        .map(|(p, y)| (p - y).abs())
        .sum::<f64>()
        / data.n_samples() as f64;
    Ok(FitReport {
        n_samples: data.n_samples(),
        n_zero_targets: zeros,
        mape: crate::stats::mean(&errs),
        mae_w,
        error_percentiles,
    })
}
