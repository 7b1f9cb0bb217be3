use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{Grower, Presorted, TreeParams};
use super::{Dataset, ModelParams, PowerModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` means `ceil(d / 3)`.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: 8,
            min_leaf: 1,
            max_features: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

/// Bagged CART trees. Tree `i` draws from its own ChaCha stream, so the
/// result is independent of how rayon schedules the trees.
pub fn fit_forest(data: &Dataset, params: &ForestParams) -> Result<PowerModel> {
    if params.n_trees < 1 {
        return Err(Error::Argument("n_trees must be ≥ 1".into()));
    }
    TreeParams {
        max_depth: params.max_depth,
        min_leaf: params.min_leaf,
    }
    .validate()?;
    let d = data.n_features();
    let max_features = params.max_features.unwrap_or(d.div_ceil(3)).clamp(1, d);
    let n = data.n_samples();

    PowerModel::timed(data, || {
        let presorted = Presorted::new(data);
        let trees = (0..params.n_trees)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
                rng.set_stream(i as u64);
                let lists = if params.bootstrap {
                    let mut counts = vec![0u32; n];
                    for _ in 0..n {
                        counts[rng.random_range(0..n)] += 1;
                    }
                    presorted.with_counts(&counts)
                } else {
                    presorted.all()
                };
                Grower {
                    data,
                    targets: data.targets(),
                    max_depth: params.max_depth,
                    min_leaf: params.min_leaf,
                    max_features: Some(max_features),
                    rng: Some(&mut rng),
                }
                .grow(lists)
            })
            .collect();
        Ok(ModelParams::Forest { trees })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regress::{fit_tree, FeatureSchema};

    fn data() -> Dataset {
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|i| {
                let t = i as f64;
                vec![
                    (t * 0.13).sin().abs(),
                    (t * 0.29).cos().abs(),
                    ((i * 7) % 11) as f64 / 11.0,
                ]
            })
            .collect();
        let ys = rows
            .iter()
            .map(|r| 85.0 + 120.0 * r[0] + 40.0 * r[1] * r[1] + 10.0 * r[2])
            .collect();
        let s = FeatureSchema::new(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        Dataset::from_rows(s, rows, ys).unwrap()
    }

    #[test]
    fn degenerate_forest_is_a_tree() {
        let d = data();
        let p = ForestParams {
            n_trees: 1,
            max_depth: 4,
            min_leaf: 2,
            max_features: Some(3),
            bootstrap: false,
            seed: 9,
        };
        let forest = fit_forest(&d, &p).unwrap();
        let tree = fit_tree(
            &d,
            &TreeParams {
                max_depth: 4,
                min_leaf: 2,
            },
        )
        .unwrap();
        let (ModelParams::Forest { trees }, ModelParams::Tree { tree }) = (&forest.params, &tree.params) else {
            unreachable!()
        };
        assert_eq!(&trees[0], tree);
    }

    #[test]
    fn constant_target() {
        let d = data();
        let flat = Dataset::new(
            d.schema().clone(),
            d.rows().flatten().copied().collect(),
            vec![42.0; 60],
        )
        .unwrap();
        let m = fit_forest(
            &flat,
            &ForestParams {
                n_trees: 7,
                ..Default::default()
            },
        )
        .unwrap();
        for r in d.rows() {
            assert_eq!(m.predict(r).unwrap(), 42.0);
        }
    }

    #[test]
    fn seeded_determinism() {
        let p = ForestParams {
            n_trees: 12,
            seed: 17,
            ..Default::default()
        };
        let a = fit_forest(&data(), &p).unwrap();
        let b = fit_forest(&data(), &p).unwrap();
        assert_eq!(a.params, b.params);
        let c = fit_forest(&data(), &ForestParams { seed: 18, ..p }).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn rejects_zero_trees() {
        assert!(fit_forest(
            &data(),
            &ForestParams {
                n_trees: 0,
                ..Default::default()
            }
        )
        .is_err());
    }
}
