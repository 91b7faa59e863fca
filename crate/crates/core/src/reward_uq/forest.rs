//! Bagged regression trees used as the auxiliary reward model.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SplError};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Draw each tree's training set with replacement.
    pub bootstrap: bool,
    /// Bootstrap sample size as a fraction of n.
    pub bootstrap_fraction: f64,
    /// Candidate features per split; all features when `None`.
    pub max_features: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 8,
            min_leaf: 2,
            bootstrap: true,
            bootstrap_fraction: 1.0,
            max_features: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

struct TreeBuilder<'a, R> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    max_depth: usize,
    min_leaf: usize,
    max_features: usize,
    rng: R,
    nodes: Vec<Node>,
}

impl<R: Rng> TreeBuilder<'_, R> {
    fn mean(&self, idx: &[usize]) -> f64 {
        idx.iter().map(|&i| self.y[i]).sum::<f64>() / idx.len() as f64
    }

    /// Best split of `idx` maximizing the reduction in squared error.
    fn best_split(&mut self, idx: &[usize]) -> Option<(usize, f64)> {
        let p = self.x[idx[0]].len();
        let candidates: Vec<usize> = if self.max_features >= p {
            (0..p).collect()
        } else {
            let mut c = sample(&mut self.rng, p, self.max_features).into_vec();
            c.sort_unstable();
            c
        };
        let n = idx.len();
        let total: f64 = idx.iter().map(|&i| self.y[i]).sum();
        let base = total * total / n as f64;
        let mut best: Option<(usize, f64, f64)> = None;
        let mut order = idx.to_vec();
        for f in candidates {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let mut left_sum = 0.0;
            for k in 0..n - 1 {
                left_sum += self.y[order[k]];
                let n_left = k + 1;
                let n_right = n - n_left;
                if n_left < self.min_leaf || n_right < self.min_leaf {
                    continue;
                }
                let (lo, hi) = (self.x[order[k]][f], self.x[order[k + 1]][f]);
                if lo == hi {
                    continue;
                }
                let right_sum = total - left_sum;
                let score = left_sum * left_sum / n_left as f64
                    + right_sum * right_sum / n_right as f64;
                let gain = score - base;
                if gain > 1e-12 && best.map_or(true, |(_, _, g)| gain > g) {
                    best = Some((f, 0.5 * (lo + hi), gain));
                }
            }
        }
        best.map(|(f, t, _)| (f, t))
    }

    fn build(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf(self.mean(&idx)));
        if depth >= self.max_depth || idx.len() < 2 * self.min_leaf.max(1) {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(&idx) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) =
            idx.into_iter().partition(|&i| self.x[i][feature] <= threshold);
        let left = self.build(l, depth + 1);
        let right = self.build(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    trees: Vec<RegressionTree>,
    /// `in_bag[t][i]`: training row `i` was drawn for tree `t`.
    in_bag: Vec<Vec<bool>>,
    n_features: usize,
    pub config: ForestConfig,
}

impl RandomForest {
    /// Tree `i` is grown from the stream `derive_seed(config.seed, i)`, so the
    /// ensemble does not depend on the order trees are built in.
    pub fn fit(x: &[Vec<f64>], y: &[f64], config: &ForestConfig) -> Result<Self> {
        if x.len() != y.len() {
            return Err(SplError::DimensionMismatch {
                expected: x.len(),
                got: y.len(),
            });
        }
        if x.len() < 2 {
            return Err(SplError::InvalidArgument(format!(
                "forest needs at least 2 samples, got {}",
                x.len()
            )));
        }
        if config.n_trees < 1 {
            return Err(SplError::InvalidArgument("forest needs at least one tree".into()));
        }
        let p = x[0].len();
        if x.iter().any(|r| r.len() != p) {
            return Err(SplError::InvalidArgument("ragged forest inputs".into()));
        }
        let n = x.len();
        let m = ((n as f64 * config.bootstrap_fraction).round() as usize).max(1);
        let (trees, in_bag) = (0..config.n_trees)
            .map(|i| {
                let mut rng = rng::seeded(rng::derive_seed(config.seed, i as u64));
                let idx: Vec<usize> = if config.bootstrap {
                    (0..m).map(|_| rng.gen_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                let mut b = TreeBuilder {
                    x,
                    y,
                    max_depth: config.max_depth,
                    min_leaf: config.min_leaf.max(1),
                    max_features: config.max_features.unwrap_or(p).clamp(1, p.max(1)),
                    rng,
                    nodes: Vec::new(),
                };
                let mut bag = vec![false; n];
                idx.iter().for_each(|&j| bag[j] = true);
                b.build(idx, 0);
                (RegressionTree { nodes: b.nodes }, bag)
            })
            .unzip();
        Ok(Self {
            trees,
            in_bag,
            n_features: p,
            config: config.clone(),
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(SplError::DimensionMismatch {
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64)
    }

    /// Out-of-bag predictions for the training rows `x`: each row averages
    /// only the trees that did not draw it, falling back to the full ensemble
    /// when every tree did.
    pub fn oob_predict(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        let n = self.in_bag.first().map_or(0, |b| b.len());
        if x.len() != n {
            return Err(SplError::DimensionMismatch {
                expected: n,
                got: x.len(),
            });
        }
        x.iter()
            .enumerate()
            .map(|(i, row)| {
                let (sum, k) = self
                    .trees
                    .iter()
                    .zip(&self.in_bag)
                    .filter(|(_, bag)| !bag[i])
                    .fold((0.0, 0usize), |(s, k), (t, _)| (s + t.predict(row), k + 1));
                if k > 0 {
                    Ok(sum / k as f64)
                } else {
                    self.predict(row)
                }
            })
            .collect()
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn constant_targets_predict_constant() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64, (i % 4) as f64]).collect();
        let y = vec![2.5; 30];
        let f = RandomForest::fit(&x, &y, &ForestConfig::default()).unwrap();
        for probe in [[-3.0, 0.0], [12.5, 2.0], [100.0, 9.0]] {
            assert_eq!(f.predict(&probe).unwrap(), 2.5);
        }
    }

    #[test]
    fn depth_zero_single_tree_is_global_mean() {
        let x: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..7).map(|i| (i * i) as f64).collect();
        let cfg = ForestConfig {
            n_trees: 1,
            max_depth: 0,
            bootstrap: false,
            ..Default::default()
        };
        let f = RandomForest::fit(&x, &y, &cfg).unwrap();
        let mean = y.iter().sum::<f64>() / 7.0;
        assert!((f.predict(&[3.3]).unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn piecewise_constant_regions_recovered() {
        let mut r = rng::seeded(3);
        let x: Vec<Vec<f64>> = (0..2000).map(|_| vec![r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|p| if p[0] < 0.0 { -2.0 } else { 3.0 } + 0.3 * (r.gen::<f64>() - 0.5))
            .collect();
        // oracle: empirical region means
        let region_mean = |neg: bool| {
            let v: Vec<f64> = x.iter().zip(&y).filter(|(p, _)| (p[0] < 0.0) == neg).map(|(_, y)| *y).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let (m_neg, m_pos) = (region_mean(true), region_mean(false));
        let f = RandomForest::fit(&x, &y, &ForestConfig { n_trees: 20, max_depth: 12, ..Default::default() }).unwrap();
        for probe in [[-0.5, 0.2], [-0.9, -0.9], [-0.2, 0.7]] {
            assert!((f.predict(&probe).unwrap() - m_neg).abs() < 0.1);
        }
        for probe in [[0.5, 0.2], [0.9, -0.9], [0.2, 0.7]] {
            assert!((f.predict(&probe).unwrap() - m_pos).abs() < 0.1);
        }
    }

    #[test]
    fn oob_predictions_exclude_in_bag_trees() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let f = RandomForest::fit(&x, &y, &ForestConfig { n_trees: 50, seed: 4, ..Default::default() }).unwrap();
        let oob = f.oob_predict(&x).unwrap();
        for (i, row) in x.iter().enumerate() {
            // oracle: average over the out-of-bag trees computed directly
            let v: Vec<f64> = f.trees.iter().zip(&f.in_bag).filter(|(_, b)| !b[i]).map(|(t, _)| t.predict(row)).collect();
            let expect = if v.is_empty() { f.predict(row).unwrap() } else { v.iter().sum::<f64>() / v.len() as f64 };
            assert_eq!(oob[i], expect);
        }
        // without bootstrap every tree sees every row
        let g = RandomForest::fit(&x, &y, &ForestConfig { n_trees: 3, bootstrap: false, ..Default::default() }).unwrap();
        assert_eq!(g.oob_predict(&x).unwrap()[5], g.predict(&x[5]).unwrap());
    }

    #[test]
    fn too_few_samples_is_an_error() {
        assert!(RandomForest::fit(&[vec![1.0]], &[1.0], &ForestConfig::default()).is_err());
    }

    #[test]
    fn fit_is_deterministic() {
        let x: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64 * 0.3).sin(), i as f64]).collect();
        let y: Vec<f64> = (0..50).map(|i| (i as f64 * 0.11).cos()).collect();
        let cfg = ForestConfig { seed: 9, ..Default::default() };
        let a = RandomForest::fit(&x, &y, &cfg).unwrap();
        let b = RandomForest::fit(&x, &y, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
