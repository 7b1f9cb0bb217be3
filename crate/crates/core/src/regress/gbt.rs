use serde::{Deserialize, Serialize};

use super::tree::{Grower, Presorted, TreeParams};
use super::{Dataset, ModelParams, PowerModel};
use crate::error::{Error, Result};

/// Squared-loss gradient boosting without regularization terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtParams {
    pub n_estimators: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            n_estimators: 100,
            learning_rate: 0.1,
            max_depth: 3,
            min_leaf: 1,
        }
    }
}

pub fn fit_gbt(data: &Dataset, params: &GbtParams) -> Result<PowerModel> {
    if params.n_estimators < 1 {
        return Err(Error::Argument("n_estimators must be ≥ 1".into()));
    }
    if !(params.learning_rate > 0.0 && params.learning_rate <= 1.0) {
        return Err(Error::Argument(format!(
            "learning rate {} outside (0, 1]",
            params.learning_rate
        )));
    }
    TreeParams {
        max_depth: params.max_depth,
        min_leaf: params.min_leaf,
    }
    .validate()?;

    PowerModel::timed(data, || {
        let y = data.targets();
        let base_score = y.iter().sum::<f64>() / y.len() as f64;
        let mut fitted = vec![base_score; y.len()];
        let mut residuals = vec![0.0; y.len()];
        let presorted = Presorted::new(data);
        let mut trees = Vec::with_capacity(params.n_estimators);
        for _ in 0..params.n_estimators {
            for ((r, yi), fi) in residuals.iter_mut().zip(y).zip(&fitted) {
                *r = yi - fi;
            }
            let tree = Grower {
                data,
                targets: &residuals,
                max_depth: params.max_depth,
                min_leaf: params.min_leaf,
                max_features: None,
                rng: None,
            }
            .grow(presorted.all());
            for (i, f) in fitted.iter_mut().enumerate() {
                *f += params.learning_rate * tree.predict(data.row(i));
            }
            trees.push(tree);
        }
        Ok(ModelParams::Gbt {
            base_score,
            learning_rate: params.learning_rate,
            trees,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regress::{fit_tree, FeatureSchema, Node};

    fn data() -> Dataset {
        let rows: Vec<Vec<f64>> = (0..80)
            .map(|i| {
                let t = i as f64;
                vec![(t * 0.17).sin().abs(), ((i * 5) % 13) as f64 / 13.0]
            })
            .collect();
        let ys = rows
            .iter()
            .map(|r| 85.0 + 200.0 * r[0].min(0.7) + 30.0 * r[1])
            .collect();
        Dataset::from_rows(FeatureSchema::new(vec!["a".into(), "b".into()]).unwrap(), rows, ys).unwrap()
    }

    fn mse(m: &PowerModel, d: &Dataset) -> f64 {
        let p = m.predict_dataset(d).unwrap();
        p.iter().zip(d.targets()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64
    }

    #[test]
    fn one_stage_full_rate_is_tree_on_centered_targets() {
        let d = data();
        let m = fit_gbt(
            &d,
            &GbtParams {
                n_estimators: 1,
                learning_rate: 1.0,
                max_depth: 2,
                min_leaf: 1,
            },
        )
        .unwrap();
        let mean = d.targets().iter().sum::<f64>() / d.n_samples() as f64;
        let centered = Dataset::new(
            d.schema().clone(),
            d.rows().flatten().copied().collect(),
            d.targets().iter().map(|y| y - mean).collect(),
        )
        .unwrap();
        let t = fit_tree(
            &centered,
            &TreeParams {
                max_depth: 2,
                min_leaf: 1,
            },
        )
        .unwrap();
        for r in d.rows() {
            let expect = mean + t.predict(r).unwrap();
            assert!((m.predict(r).unwrap() - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn more_stages_fit_better() {
        let d = data();
        let p = GbtParams::default();
        let ten = fit_gbt(
            &d,
            &GbtParams {
                n_estimators: 10,
                ..p.clone()
            },
        )
        .unwrap();
        let fifty = fit_gbt(&d, &GbtParams { n_estimators: 50, ..p }).unwrap();
        assert!(mse(&fifty, &d) <= mse(&ten, &d));
    }

    #[test]
    fn constant_target_base_only() {
        let d = data();
        let flat = Dataset::new(
            d.schema().clone(),
            d.rows().flatten().copied().collect(),
            vec![85.0; 80],
        )
        .unwrap();
        let m = fit_gbt(&flat, &GbtParams::default()).unwrap();
        let ModelParams::Gbt { base_score, trees, .. } = &m.params else {
            unreachable!()
        };
        assert_eq!(*base_score, 85.0);
        assert!(trees
            .iter()
            .all(|t| matches!(t.nodes[..], [Node::Leaf { value }] if value == 0.0)));
    }

    #[test]
    fn rejects_bad_params() {
        let d = data();
        assert!(fit_gbt(
            &d,
            &GbtParams {
                learning_rate: 0.0,
                ..Default::default()
            }
        )
        .is_err());
        assert!(fit_gbt(
            &d,
            &GbtParams {
                learning_rate: 1.5,
                ..Default::default()
            }
        )
        .is_err());
        assert!(fit_gbt(
            &d,
            &GbtParams {
                n_estimators: 0,
                ..Default::default()
            }
        )
        .is_err());
    }
}
