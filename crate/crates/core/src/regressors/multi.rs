//! Vector-input versions of the regressors, used when calibration features
//! go beyond the scalar probability. Same penalties and conventions as the
//! scalar family; a feature that is constant in training gets weight zero.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ForestParams, RegressorError};
use crate::exec::{self, Execution};
use crate::seed::SeedMixer;

pub(super) fn check_rows(rows: &[Vec<f64>], ys: &[f64], needed: usize) -> Result<usize, RegressorError> {
    if rows.len() != ys.len() {
        return Err(RegressorError::LengthMismatch(rows.len(), ys.len()));
    }
    if rows.len() < needed {
        return Err(RegressorError::TooFewPoints {
            needed,
            got: rows.len(),
        });
    }
    let d = rows.first().map_or(0, Vec::len);
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(RegressorError::InvalidSpec("feature rows must share one non-zero width".into()));
    }
    if rows.iter().flatten().chain(ys).any(|v| !v.is_finite()) {
        return Err(RegressorError::NonFinite);
    }
    Ok(d)
}

struct Centered {
    x_mean: Vec<f64>,
    y_mean: f64,
    xc: DMatrix<f64>,
    yc: DVector<f64>,
}

fn center(rows: &[Vec<f64>], ys: &[f64], d: usize) -> Result<Centered, RegressorError> {
    let n = rows.len();
    let x_mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let y_mean = ys.iter().sum::<f64>() / n as f64;
    let xc = DMatrix::from_fn(n, d, |i, j| rows[i][j] - x_mean[j]);
    if xc.iter().all(|&v| v == 0.0) {
        return Err(RegressorError::DegenerateDesign);
    }
    let yc = DVector::from_iterator(n, ys.iter().map(|y| y - y_mean));
    Ok(Centered { x_mean, y_mean, xc, yc })
}

fn intercept(c: &Centered, weights: &[f64]) -> f64 {
    c.y_mean - weights.iter().zip(&c.x_mean).map(|(w, m)| w * m).sum::<f64>()
}

/// Minimizes `(1/n)·RSS + alpha·‖w‖²`; `alpha = 0` is least squares with the
/// minimum-norm solution when features are collinear.
pub(super) fn ridge(rows: &[Vec<f64>], ys: &[f64], alpha: f64) -> Result<(Vec<f64>, f64), RegressorError> {
    let d = check_rows(rows, ys, 2)?;
    let c = center(rows, ys, d)?;
    let n = rows.len() as f64;
    let gram = c.xc.tr_mul(&c.xc) + DMatrix::identity(d, d) * (n * alpha);
    let rhs = c.xc.tr_mul(&c.yc);
    let svd = gram.svd(true, true);
    let eps = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE);
    let w = svd.solve(&rhs, eps).map_err(|e| RegressorError::InvalidSpec(e.to_string()))?;
    let weights: Vec<f64> = w.iter().copied().collect();
    let b = intercept(&c, &weights);
    Ok((weights, b))
}

fn soft_threshold(z: f64, gamma: f64) -> f64 {
    z.signum() * (z.abs() - gamma).max(0.0)
}

/// Minimizes `(1/2n)·RSS + alpha·‖w‖₁` by cyclic coordinate descent on
/// centered features.
pub(super) fn lasso(
    rows: &[Vec<f64>],
    ys: &[f64],
    alpha: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<(Vec<f64>, f64), RegressorError> {
    let d = check_rows(rows, ys, 2)?;
    let c = center(rows, ys, d)?;
    let n = rows.len() as f64;
    let norms: Vec<f64> = (0..d).map(|j| c.xc.column(j).norm_squared() / n).collect();
    let mut w = vec![0.0; d];
    let mut residual = c.yc.clone();
    for _ in 0..max_sweeps {
        let mut moved: f64 = 0.0;
        for j in 0..d {
            if norms[j] == 0.0 {
                continue;
            }
            let col = c.xc.column(j);
            let rho = col.dot(&residual) / n + norms[j] * w[j];
            let new = soft_threshold(rho, alpha) / norms[j];
            let delta = new - w[j];
            if delta != 0.0 {
                residual.axpy(-delta, &col, 1.0);
                w[j] = new;
            }
            moved = moved.max(delta.abs());
        }
        if moved <= tol {
            break;
        }
    }
    let b = intercept(&c, &w);
    Ok((w, b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiNode {
    Leaf(f64),
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTree {
    pub nodes: Vec<MultiNode>,
}

impl MultiTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                MultiNode::Leaf(v) => return v,
                MultiNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn grow(rows: &[Vec<f64>], ys: &[f64], max_depth: Option<usize>, min_leaf: usize) -> Self {
        let mut b = TreeBuilder {
            rows,
            ys,
            max_depth,
            min_leaf: min_leaf.max(1),
            nodes: Vec::new(),
        };
        b.build((0..rows.len()).collect(), 0);
        MultiTree { nodes: b.nodes }
    }
}

struct TreeBuilder<'a> {
    rows: &'a [Vec<f64>],
    ys: &'a [f64],
    max_depth: Option<usize>,
    min_leaf: usize,
    nodes: Vec<MultiNode>,
}

impl TreeBuilder<'_> {
    fn leaf_value(&self, idx: &[usize]) -> f64 {
        let mean = idx.iter().map(|&i| self.ys[i]).sum::<f64>() / idx.len() as f64;
        let (min, max) = idx
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &i| (a.min(self.ys[i]), b.max(self.ys[i])));
        mean.clamp(min, max)
    }

    fn build(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(MultiNode::Leaf(self.leaf_value(&idx)));
        if self.max_depth.is_some_and(|d| depth >= d) || idx.len() < 2 * self.min_leaf {
            return id;
        }
        if idx.iter().all(|&i| self.ys[i] == self.ys[idx[0]]) {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(&idx) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.rows[i][feature] <= threshold);
        if l.is_empty() || r.is_empty() {
            return id;
        }
        let left = self.build(l, depth + 1);
        let right = self.build(r, depth + 1);
        self.nodes[id] = MultiNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    /// Best `(feature, threshold)` by SSE reduction; earlier features win ties.
    fn best_split(&self, idx: &[usize]) -> Option<(usize, f64)> {
        let n = idx.len();
        let total: f64 = idx.iter().map(|&i| self.ys[i]).sum();
        let total_sq: f64 = idx.iter().map(|&i| self.ys[i] * self.ys[i]).sum();
        let parent = total * total / n as f64;
        let parent_sse = total_sq - parent;
        let mut best: Option<(usize, f64, f64)> = None;
        let mut order = idx.to_vec();
        for f in 0..self.rows[idx[0]].len() {
            order.sort_by(|&a, &b| self.rows[a][f].total_cmp(&self.rows[b][f]));
            let mut left = 0.0;
            for (pos, &i) in order.iter().enumerate().take(n - self.min_leaf) {
                left += self.ys[i];
                let cut = pos + 1;
                if cut < self.min_leaf {
                    continue;
                }
                let (a, b) = (self.rows[i][f], self.rows[order[cut]][f]);
                if a == b {
                    continue;
                }
                let right = total - left;
                let score = left * left / cut as f64 + right * right / (n - cut) as f64;
                if best.is_none_or(|(_, _, s)| score > s) {
                    best = Some((f, 0.5 * (a + b), score));
                }
            }
        }
        let (f, threshold, score) = best?;
        (score - parent > 1e-12 * parent_sse.abs().max(1e-300)).then_some((f, threshold))
    }
}

pub(super) fn fit_forest(params: &ForestParams, rows: &[Vec<f64>], ys: &[f64], exec: Execution) -> Vec<MultiTree> {
    exec::map_range(exec, params.n_trees, |t| {
        if !params.bootstrap {
            return MultiTree::grow(rows, ys, params.max_depth, params.min_leaf);
        }
        let mut rng = SeedMixer::new(params.seed).str("tree").u64(t as u64).rng();
        let n = rows.len();
        let (br, by): (Vec<Vec<f64>>, Vec<f64>) = (0..n)
            .map(|_| {
                let i = rng.random_range(0..n);
                (rows[i].clone(), ys[i])
            })
            .unzip();
        MultiTree::grow(&br, &by, params.max_depth, params.min_leaf)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ridge_recovers_plane_and_ignores_constant_feature() {
        // y = 0.5 + 2a - b, third feature constant
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![i as f64 / 19.0, ((i * 7) % 20) as f64 / 19.0, 4.0])
            .collect();
        let ys: Vec<f64> = rows.iter().map(|r| 0.5 + 2.0 * r[0] - r[1]).collect();
        let (w, b) = ridge(&rows, &ys, 0.0).unwrap();
        assert!((w[0] - 2.0).abs() < 1e-10 && (w[1] + 1.0).abs() < 1e-10, "{w:?}");
        assert!(w[2].abs() < 1e-10);
        assert!((b - 0.5).abs() < 1e-10);
        let (wl, bl) = lasso(&rows, &ys, 0.0, 1e-14, 100_000).unwrap();
        assert!((wl[0] - 2.0).abs() < 1e-8 && (wl[1] + 1.0).abs() < 1e-8 && (bl - 0.5).abs() < 1e-8);
        assert_eq!(wl[2], 0.0);
    }

    #[test]
    fn one_column_matches_scalar_closed_forms() {
        let xs = [0.05, 0.2, 0.4, 0.35, 0.9];
        let ys = [0.1, 0.25, 0.3, 0.45, 0.7];
        let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        for alpha in [0.0, 0.1, 1.0] {
            let (s, i) = super::super::linear::ridge(&xs, &ys, alpha).unwrap();
            let (w, b) = ridge(&rows, &ys, alpha).unwrap();
            assert!((w[0] - s).abs() < 1e-12 && (b - i).abs() < 1e-12);
        }
        for alpha in [0.0, 0.01, 0.05] {
            let sol = super::super::lasso_coordinate_descent(&xs, &ys, alpha, 1e-14, 100_000).unwrap();
            let (w, b) = lasso(&rows, &ys, alpha, 1e-14, 100_000).unwrap();
            assert!((w[0] - sol.slope).abs() < 1e-9 && (b - sol.intercept).abs() < 1e-9);
        }
    }

    #[test]
    fn tree_splits_on_the_informative_feature() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 5) as f64, (i / 20) as f64]).collect();
        let ys: Vec<f64> = rows.iter().map(|r| 10.0 * r[1]).collect();
        let t = MultiTree::grow(&rows, &ys, Some(1), 1);
        assert!(matches!(t.nodes[0], MultiNode::Split { feature: 1, .. }));
        assert_eq!(t.predict(&[3.0, 0.0]), 0.0);
        assert_eq!(t.predict(&[3.0, 1.0]), 10.0);
    }

    #[test]
    fn degenerate_and_ragged_inputs() {
        let rows = vec![vec![1.0, 2.0]; 3];
        assert_eq!(ridge(&rows, &[0.1, 0.2, 0.3], 0.0), Err(RegressorError::DegenerateDesign));
        let ragged = vec![vec![1.0, 2.0], vec![1.0]];
        assert!(matches!(ridge(&ragged, &[0.1, 0.2], 0.0), Err(RegressorError::InvalidSpec(_))));
    }
}
