//! Bootstrap-aggregated regression trees on a single scalar feature.
//!
//! Each tree sorts its sample once; every node then owns a contiguous range
//! of the sorted arrays and candidate splits are scored from prefix sums.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RegressorError;
use crate::exec::{self, Execution};
use crate::seed::SeedMixer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` grows until leaves are pure or hit `min_leaf`.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub seed: u64,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: bool,
}

fn default_bootstrap() -> bool {
    true
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: Some(8),
            min_leaf: 2,
            seed: 0,
            bootstrap: true,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<(), RegressorError> {
        if self.n_trees == 0 {
            return Err(RegressorError::InvalidSpec("n_trees must be >= 1".into()));
        }
        if self.min_leaf == 0 {
            return Err(RegressorError::InvalidSpec("min_leaf must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Leaf(f64),
    /// `x <= threshold` goes left.
    Split { threshold: f64, left: usize, right: usize },
}

/// Nodes stored flat; index 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn predict(&self, x: f64) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf(v) => return v,
                TreeNode::Split { threshold, left, right } => {
                    i = if x <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[TreeNode], i: usize) -> usize {
            match nodes[i] {
                TreeNode::Leaf(_) => 0,
                TreeNode::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }

    /// Grows a tree on `(xs, ys)` as given (no resampling).
    pub fn grow(xs: &[f64], ys: &[f64], max_depth: Option<usize>, min_leaf: usize) -> Self {
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
        let sx: Vec<f64> = order.iter().map(|&i| xs[i]).collect();
        let sy: Vec<f64> = order.iter().map(|&i| ys[i]).collect();
        let mut sum = Vec::with_capacity(sy.len() + 1);
        let mut sum_sq = Vec::with_capacity(sy.len() + 1);
        sum.push(0.0);
        sum_sq.push(0.0);
        for &y in &sy {
            sum.push(sum.last().unwrap() + y);
            sum_sq.push(sum_sq.last().unwrap() + y * y);
        }
        let mut builder = Builder {
            xs: &sx,
            ys: &sy,
            sum: &sum,
            sum_sq: &sum_sq,
            max_depth,
            min_leaf: min_leaf.max(1),
            nodes: Vec::new(),
        };
        builder.build(0, sx.len(), 0);
        RegressionTree { nodes: builder.nodes }
    }
}

struct Builder<'a> {
    xs: &'a [f64],
    ys: &'a [f64],
    sum: &'a [f64],
    sum_sq: &'a [f64],
    max_depth: Option<usize>,
    min_leaf: usize,
    nodes: Vec<TreeNode>,
}

impl Builder<'_> {
    fn range_sum(&self, lo: usize, hi: usize) -> f64 {
        self.sum[hi] - self.sum[lo]
    }

    fn leaf_value(&self, lo: usize, hi: usize) -> f64 {
        let mean = self.range_sum(lo, hi) / (hi - lo) as f64;
        // keep the leaf inside the observed range despite prefix-sum rounding
        let (min, max) = self.ys[lo..hi]
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
        mean.clamp(min, max)
    }

    fn build(&mut self, lo: usize, hi: usize, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(TreeNode::Leaf(self.leaf_value(lo, hi)));
        if self.max_depth.is_some_and(|d| depth >= d) || hi - lo < 2 * self.min_leaf {
            return id;
        }
        if self.ys[lo..hi].iter().all(|&y| y == self.ys[lo]) {
            return id;
        }
        let Some(cut) = self.best_cut(lo, hi) else {
            return id;
        };
        let threshold = 0.5 * (self.xs[cut - 1] + self.xs[cut]);
        let left = self.build(lo, cut, depth + 1);
        let right = self.build(cut, hi, depth + 1);
        self.nodes[id] = TreeNode::Split { threshold, left, right };
        id
    }

    /// Cut position maximizing `S_L²/n_L + S_R²/n_R` (equivalently minimizing SSE).
    fn best_cut(&self, lo: usize, hi: usize) -> Option<usize> {
        let total = self.range_sum(lo, hi);
        let n = (hi - lo) as f64;
        let parent = total * total / n;
        let parent_sse = (self.sum_sq[hi] - self.sum_sq[lo]) - parent;
        let mut best: Option<(usize, f64)> = None;
        for cut in (lo + self.min_leaf)..=(hi - self.min_leaf) {
            if self.xs[cut - 1] == self.xs[cut] {
                continue;
            }
            let left = self.range_sum(lo, cut);
            let right = total - left;
            let score = left * left / (cut - lo) as f64 + right * right / (hi - cut) as f64;
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((cut, score));
            }
        }
        let (cut, score) = best?;
        let gain = score - parent;
        (gain > 1e-12 * parent_sse.abs().max(1e-300)).then_some(cut)
    }
}

pub(super) fn fit_forest(params: &ForestParams, xs: &[f64], ys: &[f64], exec: Execution) -> Vec<RegressionTree> {
    exec::map_range(exec, params.n_trees, |t| {
        if !params.bootstrap {
            return RegressionTree::grow(xs, ys, params.max_depth, params.min_leaf);
        }
        let mut rng = SeedMixer::new(params.seed).str("tree").u64(t as u64).rng();
        let n = xs.len();
        let (bx, by): (Vec<f64>, Vec<f64>) = (0..n)
            .map(|_| {
                let i = rng.random_range(0..n);
                (xs[i], ys[i])
            })
            .unzip();
        RegressionTree::grow(&bx, &by, params.max_depth, params.min_leaf)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regressors::{fit, RegressorSpec};

    #[test]
    fn single_tree_memorizes_training_points() {
        let xs = [0.1, 0.3, 0.3, 0.6, 0.9];
        let ys = [0.5, 0.2, 0.2, 0.8, 0.1];
        let spec = RegressorSpec::RandomForest(ForestParams {
            n_trees: 1,
            max_depth: None,
            min_leaf: 1,
            seed: 4,
            bootstrap: false,
        });
        let f = fit(&spec, &xs, &ys).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert_eq!(f.predict(*x), *y);
        }
    }

    #[test]
    fn bootstrapped_tree_memorizes_in_bag_points() {
        let xs: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let ys = [3.0, 1.0, 4.0, 1.5, 9.0];
        let params = ForestParams {
            n_trees: 1,
            max_depth: None,
            min_leaf: 1,
            seed: 9,
            bootstrap: true,
        };
        let tree = &fit_forest(&params, &xs, &ys, Execution::Sequential)[0];
        let hits = xs.iter().zip(&ys).filter(|(x, y)| tree.predict(**x) == **y).count();
        // the in-bag points (at least one) predict exactly
        assert!(hits >= 1);
    }

    #[test]
    fn depth_limit_is_respected() {
        let xs: Vec<f64> = (0..200).map(|i| i as f64 / 199.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (10.0 * x).sin()).collect();
        for d in [0, 1, 4] {
            let t = RegressionTree::grow(&xs, &ys, Some(d), 1);
            assert!(t.depth() <= d);
        }
        assert_eq!(RegressionTree::grow(&xs, &ys, Some(0), 1).nodes.len(), 1);
    }

    #[test]
    fn min_leaf_is_respected() {
        let xs: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let t = RegressionTree::grow(&xs, &ys, None, 5);
        // every leaf value is a mean over >= 5 consecutive points, so no leaf
        // can equal one of the two extreme ys
        for x in &xs {
            let p = t.predict(*x);
            assert!(p > ys[0] && p < ys[29]);
        }
    }

    #[test]
    fn forest_beats_line_on_a_parabola() {
        // 50-point grid on [0, 1], even indices train, odd indices dev.
        let xs: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let (tx, ty): (Vec<f64>, Vec<f64>) = xs.iter().zip(&ys).step_by(2).map(|(a, b)| (*a, *b)).unzip();
        let (dx, dy): (Vec<f64>, Vec<f64>) = xs.iter().zip(&ys).skip(1).step_by(2).map(|(a, b)| (*a, *b)).unzip();
        let ols = fit(&RegressorSpec::Ols, &tx, &ty).unwrap();
        let ols_dev = crate::regressors::mse(&ols, &dx, &dy).unwrap();
        // reference value from an independent least-squares solve
        assert!((ols_dev - 0.006119517395309918).abs() < 1e-12);
        let forest = fit(&RegressorSpec::RandomForest(ForestParams::default()), &tx, &ty).unwrap();
        let forest_dev = crate::regressors::mse(&forest, &dx, &dy).unwrap();
        assert!(forest_dev < ols_dev, "{forest_dev} >= {ols_dev}");
    }
}
