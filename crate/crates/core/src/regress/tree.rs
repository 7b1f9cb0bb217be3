//! CART regression trees grown by greedy variance reduction.
//!
//! Rows are presorted once per feature. A node carries, for every feature,
//! its row indices in ascending feature order (duplicates allowed, which is
//! how bootstrap resamples are represented), and splitting partitions those
//! lists stably, so no node ever re-sorts.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, ModelParams, PowerModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: 6,
            min_leaf: 5,
        }
    }
}

impl TreeParams {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.max_depth < 1 || self.min_leaf < 1 {
            return Err(Error::Argument("max_depth and min_leaf must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Node {
    Leaf {
        value: f64,
    },
    /// Rows with `x[feature] < threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[feature] < threshold { left } else { right },
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(t, left).max(walk(t, right)),
            }
        }
        walk(self, 0)
    }

    /// Every split threshold, for tests and diagnostics.
    pub fn thresholds(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.nodes.iter().filter_map(|n| match *n {
            Node::Split { feature, threshold, .. } => Some((feature, threshold)),
            Node::Leaf { .. } => None,
        })
    }

    pub(crate) fn check(&self, n_features: usize) -> std::result::Result<(), String> {
        if self.nodes.is_empty() {
            return Err("tree without nodes".into());
        }
        // children must point forward so prediction always terminates
        for (i, n) in self.nodes.iter().enumerate() {
            match *n {
                Node::Leaf { value } if !value.is_finite() => return Err("non-finite leaf".into()),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    if feature >= n_features
                        || !threshold.is_finite()
                        || left <= i
                        || right <= i
                        || left >= self.nodes.len()
                        || right >= self.nodes.len()
                    {
                        return Err(format!("malformed split node {i}"));
                    }
                }
                Node::Leaf { .. } => {}
            }
        }
        Ok(())
    }
}

/// Per-feature row orderings of a dataset.
pub(crate) struct Presorted {
    by_feature: Vec<Vec<usize>>,
}

impl Presorted {
    pub(crate) fn new(data: &Dataset) -> Self {
        let n = data.n_samples();
        let by_feature = (0..data.n_features())
            .map(|f| {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.sort_by(|&a, &b| data.value(a, f).total_cmp(&data.value(b, f)).then(a.cmp(&b)));
                idx
            })
            .collect();
        Presorted { by_feature }
    }

    /// Root lists when each row appears `counts[row]` times.
    pub(crate) fn with_counts(&self, counts: &[u32]) -> Vec<Vec<usize>> {
        self.by_feature
            .iter()
            .map(|order| {
                order
                    .iter()
                    .flat_map(|&r| std::iter::repeat_n(r, counts[r] as usize))
                    .collect()
            })
            .collect()
    }

    pub(crate) fn all(&self) -> Vec<Vec<usize>> {
        self.by_feature.clone()
    }
}

pub(crate) struct Grower<'a> {
    pub data: &'a Dataset,
    pub targets: &'a [f64],
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features examined per split; `None` means all of them.
    pub max_features: Option<usize>,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

struct Best {
    feature: usize,
    threshold: f64,
    score: f64,
}

impl<'a> Grower<'a> {
    pub(crate) fn grow(mut self, lists: Vec<Vec<usize>>) -> Tree {
        let mut nodes = Vec::new();
        let mut go_left = vec![false; self.data.n_samples()];
        self.node(lists, 0, &mut nodes, &mut go_left);
        Tree { nodes }
    }

    fn node(&mut self, lists: Vec<Vec<usize>>, depth: usize, nodes: &mut Vec<Node>, go_left: &mut [bool]) -> usize {
        let rows = &lists[0];
        let n = rows.len();
        let (sum, sum_sq) = rows.iter().fold((0.0, 0.0), |(s, q), &r| {
            let y = self.targets[r];
            (s + y, q + y * y)
        });
        let mean = sum / n as f64;
        let id = nodes.len();
        nodes.push(Node::Leaf { value: mean });

        let sse = sum_sq - sum * sum / n as f64;
        if depth >= self.max_depth || n < 2 * self.min_leaf || sse <= 1e-12 * sum_sq.max(f64::MIN_POSITIVE) {
            return id;
        }
        let Some(best) = self.best_split(&lists, sum) else {
            return id;
        };
        let gain = best.score - sum * sum / n as f64;
        if !(gain > 1e-12 * sse) {
            return id;
        }

        for &r in rows {
            go_left[r] = self.data.value(r, best.feature) < best.threshold;
        }
        let (left, right): (Vec<_>, Vec<_>) = lists
            .into_iter()
            .map(|l| l.into_iter().partition::<Vec<usize>, _>(|&r| go_left[r]))
            .unzip();
        let l = self.node(left, depth + 1, nodes, go_left);
        let r = self.node(right, depth + 1, nodes, go_left);
        nodes[id] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: l,
            right: r,
        };
        id
    }

    fn candidate_features(&mut self) -> Vec<usize> {
        let d = self.data.n_features();
        match (self.max_features, self.rng.as_deref_mut()) {
            (Some(k), Some(rng)) if k < d => {
                let mut f = sample(rng, d, k).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..d).collect(),
        }
    }

    /// Maximizes `sum_l^2/n_l + sum_r^2/n_r`, which is equivalent to
    /// minimizing the children's summed squared error. Ties keep the first
    /// candidate seen: lowest feature, then lowest threshold.
    fn best_split(&mut self, lists: &[Vec<usize>], total: f64) -> Option<Best> {
        let n = lists[0].len();
        let mut best: Option<Best> = None;
        for f in self.candidate_features() {
            let order = &lists[f];
            let mut left_sum = 0.0;
            for i in 0..n - 1 {
                let r = order[i];
                left_sum += self.targets[r];
                let nl = i + 1;
                let nr = n - nl;
                if nl < self.min_leaf {
                    continue;
                }
                if nr < self.min_leaf {
                    break;
                }
                let x = self.data.value(r, f);
                let next = self.data.value(order[i + 1], f);
                if !(next > x) {
                    continue;
                }
                let right_sum = total - left_sum;
                let score = left_sum * left_sum / nl as f64 + right_sum * right_sum / nr as f64;
                if best.as_ref().is_none_or(|b| score > b.score) {
                    let mut threshold = x + (next - x) / 2.0;
                    if threshold <= x {
                        threshold = next;
                    }
                    best = Some(Best {
                        feature: f,
                        threshold,
                        score,
                    });
                }
            }
        }
        best
    }
}

pub fn fit_tree(data: &Dataset, params: &TreeParams) -> Result<PowerModel> {
    params.validate()?;
    PowerModel::timed(data, || {
        let tree = Grower {
            data,
            targets: data.targets(),
            max_depth: params.max_depth,
            min_leaf: params.min_leaf,
            max_features: None,
            rng: None,
        }
        .grow(Presorted::new(data).all());
        Ok(ModelParams::Tree { tree })
    })
}
