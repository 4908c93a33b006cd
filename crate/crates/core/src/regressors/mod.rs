//! Regressors sharing one fit/predict contract. Calibration normally feeds a
//! single scalar; [`fit_rows`] takes feature vectors.
//!
//! The linear family (OLS, ridge, lasso) never penalizes the intercept.
//! Penalties are per-sample so one alpha means the same thing regardless of
//! how many training pairs a setting has:
//!
//! * ridge minimizes `(1/n)·RSS + alpha·slope²`, i.e. `slope = Sxy / (Sxx + n·alpha)`
//!   on centered data;
//! * lasso minimizes `(1/2n)·RSS + alpha·|slope|` by coordinate descent.

mod forest;
mod linear;
mod multi;

pub use forest::{ForestParams, RegressionTree, TreeNode};
pub use multi::{MultiNode, MultiTree};
pub use linear::{lasso_coordinate_descent, lasso_objective, LassoSolution, LASSO_MAX_SWEEPS, LASSO_TOLERANCE};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegressorError {
    #[error("length mismatch: {0} xs vs {1} ys")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("all xs are identical; the linear family is undetermined")]
    DegenerateDesign,
    #[error("invalid regressor spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite training value")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegressorSpec {
    Ols,
    Ridge { alpha: f64 },
    Lasso { alpha: f64 },
    RandomForest(ForestParams),
}

impl RegressorSpec {
    pub fn validate(&self) -> Result<(), RegressorError> {
        match self {
            RegressorSpec::Ols => Ok(()),
            RegressorSpec::Ridge { alpha } | RegressorSpec::Lasso { alpha } => {
                if alpha.is_finite() && *alpha >= 0.0 {
                    Ok(())
                } else {
                    Err(RegressorError::InvalidSpec(format!("alpha must be >= 0, got {alpha}")))
                }
            }
            RegressorSpec::RandomForest(p) => p.validate(),
        }
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self, RegressorSpec::RandomForest(_))
    }

    /// Short label used in reports, e.g. `ridge(0.1)` or `forest(d8,l2)`.
    pub fn label(&self) -> String {
        match self {
            RegressorSpec::Ols => "ols".to_string(),
            RegressorSpec::Ridge { alpha } => format!("ridge({alpha})"),
            RegressorSpec::Lasso { alpha } => format!("lasso({alpha})"),
            RegressorSpec::RandomForest(p) => {
                let depth = p.max_depth.map_or("inf".to_string(), |d| d.to_string());
                format!("forest(t{},d{},l{})", p.n_trees, depth, p.min_leaf)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FittedModel {
    Linear { slope: f64, intercept: f64 },
    Forest { trees: Vec<RegressionTree> },
    LinearMulti { weights: Vec<f64>, intercept: f64 },
    ForestMulti { n_features: usize, trees: Vec<MultiTree> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub n_points: usize,
    pub train_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedRegressor {
    pub spec: RegressorSpec,
    pub model: FittedModel,
    pub summary: TrainingSummary,
}

impl FittedRegressor {
    /// A fixed affine map, mostly useful for tests and baselines.
    pub fn affine(slope: f64, intercept: f64) -> Self {
        FittedRegressor {
            spec: RegressorSpec::Ols,
            model: FittedModel::Linear { slope, intercept },
            summary: TrainingSummary {
                n_points: 0,
                train_mse: 0.0,
            },
        }
    }

    pub fn predict(&self, x: f64) -> f64 {
        self.predict_row(std::slice::from_ref(&x))
    }

    /// Prediction for one feature row; scalar models read `row[0]`.
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        match &self.model {
            FittedModel::Linear { slope, intercept } => intercept + slope * row[0],
            FittedModel::Forest { trees } => {
                trees.iter().map(|t| t.predict(row[0])).sum::<f64>() / trees.len() as f64
            }
            FittedModel::LinearMulti { weights, intercept } => {
                assert_eq!(weights.len(), row.len(), "feature width");
                intercept + weights.iter().zip(row).map(|(w, x)| w * x).sum::<f64>()
            }
            FittedModel::ForestMulti { n_features, trees } => {
                assert_eq!(*n_features, row.len(), "feature width");
                trees.iter().map(|t| t.predict(row)).sum::<f64>() / trees.len() as f64
            }
        }
    }

    /// Number of input features the model expects.
    pub fn n_features(&self) -> usize {
        match &self.model {
            FittedModel::LinearMulti { weights, .. } => weights.len(),
            FittedModel::ForestMulti { n_features, .. } => *n_features,
            FittedModel::Linear { .. } | FittedModel::Forest { .. } => 1,
        }
    }

    pub fn linear_params(&self) -> Option<(f64, f64)> {
        match self.model {
            FittedModel::Linear { slope, intercept } => Some((slope, intercept)),
            _ => None,
        }
    }
}

fn check_inputs(xs: &[f64], ys: &[f64], needed: usize) -> Result<(), RegressorError> {
    if xs.len() != ys.len() {
        return Err(RegressorError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < needed {
        return Err(RegressorError::TooFewPoints {
            needed,
            got: xs.len(),
        });
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(RegressorError::NonFinite);
    }
    Ok(())
}

pub fn fit(spec: &RegressorSpec, xs: &[f64], ys: &[f64]) -> Result<FittedRegressor, RegressorError> {
    fit_with(spec, xs, ys, Execution::default())
}

/// Like [`fit`], choosing how forest trees are scheduled. The result does not
/// depend on `exec`.
pub fn fit_with(
    spec: &RegressorSpec,
    xs: &[f64],
    ys: &[f64],
    exec: Execution,
) -> Result<FittedRegressor, RegressorError> {
    spec.validate()?;
    check_inputs(xs, ys, 2)?;
    let model = match spec {
        RegressorSpec::Ols => {
            let (slope, intercept) = linear::ridge(xs, ys, 0.0)?;
            FittedModel::Linear { slope, intercept }
        }
        RegressorSpec::Ridge { alpha } => {
            let (slope, intercept) = linear::ridge(xs, ys, *alpha)?;
            FittedModel::Linear { slope, intercept }
        }
        RegressorSpec::Lasso { alpha } => {
            let sol = lasso_coordinate_descent(xs, ys, *alpha, LASSO_TOLERANCE, LASSO_MAX_SWEEPS)?;
            FittedModel::Linear {
                slope: sol.slope,
                intercept: sol.intercept,
            }
        }
        RegressorSpec::RandomForest(params) => FittedModel::Forest {
            trees: forest::fit_forest(params, xs, ys, exec),
        },
    };
    let mut fitted = FittedRegressor {
        spec: spec.clone(),
        model,
        summary: TrainingSummary {
            n_points: xs.len(),
            train_mse: 0.0,
        },
    };
    fitted.summary.train_mse = mse(&fitted, xs, ys)?;
    Ok(fitted)
}

/// Fits on feature rows. One-column rows go through the scalar path, so
/// `fit_rows` on `[[x]]` equals [`fit_with`] on `xs`.
pub fn fit_rows(
    spec: &RegressorSpec,
    rows: &[Vec<f64>],
    ys: &[f64],
    exec: Execution,
) -> Result<FittedRegressor, RegressorError> {
    spec.validate()?;
    let d = multi::check_rows(rows, ys, 2)?;
    if d == 1 {
        let xs: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        return fit_with(spec, &xs, ys, exec);
    }
    let model = match spec {
        RegressorSpec::Ols => {
            let (weights, intercept) = multi::ridge(rows, ys, 0.0)?;
            FittedModel::LinearMulti { weights, intercept }
        }
        RegressorSpec::Ridge { alpha } => {
            let (weights, intercept) = multi::ridge(rows, ys, *alpha)?;
            FittedModel::LinearMulti { weights, intercept }
        }
        RegressorSpec::Lasso { alpha } => {
            let (weights, intercept) = multi::lasso(rows, ys, *alpha, LASSO_TOLERANCE, LASSO_MAX_SWEEPS)?;
            FittedModel::LinearMulti { weights, intercept }
        }
        RegressorSpec::RandomForest(params) => FittedModel::ForestMulti {
            n_features: d,
            trees: multi::fit_forest(params, rows, ys, exec),
        },
    };
    let mut fitted = FittedRegressor {
        spec: spec.clone(),
        model,
        summary: TrainingSummary {
            n_points: rows.len(),
            train_mse: 0.0,
        },
    };
    fitted.summary.train_mse = mse_rows(&fitted, rows, ys)?;
    Ok(fitted)
}

pub fn mse_rows(fitted: &FittedRegressor, rows: &[Vec<f64>], ys: &[f64]) -> Result<f64, RegressorError> {
    multi::check_rows(rows, ys, 1)?;
    let sum: f64 = rows.iter().zip(ys).map(|(r, &y)| (fitted.predict_row(r) - y).powi(2)).sum();
    Ok(sum / rows.len() as f64)
}

pub fn predict(fitted: &FittedRegressor, x: f64) -> f64 {
    fitted.predict(x)
}

pub fn mse(fitted: &FittedRegressor, xs: &[f64], ys: &[f64]) -> Result<f64, RegressorError> {
    check_inputs(xs, ys, 1)?;
    let sum: f64 = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| (fitted.predict(x) - y).powi(2))
        .sum();
    Ok(sum / xs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn ols_two_point_line() {
        let f = fit(&RegressorSpec::Ols, &[0.0, 1.0], &[0.0, 1.0]).unwrap();
        let (slope, intercept) = f.linear_params().unwrap();
        assert_abs_diff_eq!(slope, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(intercept, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f.predict(0.3), 0.3, epsilon = 1e-15);
        assert!(mse(&f, &[0.0, 1.0], &[0.0, 1.0]).unwrap() <= 1e-12);
    }

    #[test]
    fn ridge_closed_form() {
        // centered xs = [-1, 1], ys = [-1, 1]: Sxy = 2, Sxx = 2, n·alpha = 2
        let f = fit(&RegressorSpec::Ridge { alpha: 1.0 }, &[-1.0, 1.0], &[-1.0, 1.0]).unwrap();
        let (slope, intercept) = f.linear_params().unwrap();
        assert_abs_diff_eq!(slope, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(intercept, 0.0, epsilon = 1e-15);

        let ys = [0.3, 0.9, 0.1, 0.5];
        let f = fit(&RegressorSpec::Ridge { alpha: 1e9 }, &[0.0, 1.0, 2.0, 3.0], &ys).unwrap();
        assert!(f.linear_params().unwrap().0.abs() < 1e-8);
        assert_abs_diff_eq!(f.predict(17.0), 0.45, epsilon = 1e-6);
    }

    #[test]
    fn constant_xs_are_degenerate_for_linear_only() {
        let xs = [0.2, 0.2, 0.2];
        let ys = [0.1, 0.4, 0.3];
        for spec in [RegressorSpec::Ols, RegressorSpec::Ridge { alpha: 1.0 }, RegressorSpec::Lasso { alpha: 0.1 }] {
            assert_eq!(fit(&spec, &xs, &ys), Err(RegressorError::DegenerateDesign));
        }
        let forest = fit(&RegressorSpec::RandomForest(ForestParams::default()), &xs, &ys).unwrap();
        assert!(forest.predict(0.2) >= 0.1 && forest.predict(0.2) <= 0.4);
    }

    #[test]
    fn input_errors() {
        assert_eq!(
            fit(&RegressorSpec::Ols, &[1.0, 2.0], &[1.0]),
            Err(RegressorError::LengthMismatch(2, 1))
        );
        assert!(matches!(
            fit(&RegressorSpec::Ols, &[1.0], &[1.0]),
            Err(RegressorError::TooFewPoints { .. })
        ));
        assert!(matches!(
            fit(&RegressorSpec::Ridge { alpha: -1.0 }, &[1.0, 2.0], &[1.0, 2.0]),
            Err(RegressorError::InvalidSpec(_))
        ));
    }

    #[test]
    fn mse_examples() {
        let c = FittedRegressor::affine(0.0, 2.0);
        assert_abs_diff_eq!(mse(&c, &[5.0, 7.0], &[1.0, 3.0]).unwrap(), 1.0);
        let id = FittedRegressor::affine(1.0, 0.0);
        assert_eq!(mse(&id, &[0.1, 0.4], &[0.1, 0.4]).unwrap(), 0.0);
    }

    #[test]
    fn lasso_fully_shrunk_predicts_mean() {
        let xs = [0.1, 0.2, 0.3, 0.4];
        let ys = [0.2, 0.1, 0.4, 0.3];
        let f = fit(&RegressorSpec::Lasso { alpha: 10.0 }, &xs, &ys).unwrap();
        assert_eq!(f.linear_params().unwrap().0, 0.0);
        assert_abs_diff_eq!(f.predict(0.9), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn fitted_json_round_trip() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let params = ForestParams {
            n_trees: 3,
            ..ForestParams::default()
        };
        let f = fit(&RegressorSpec::RandomForest(params), &xs, &ys).unwrap();
        let back: FittedRegressor = serde_json::from_str(&serde_json::to_string(&f).unwrap()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn fit_rows_one_column_is_the_scalar_fit() {
        let xs: Vec<f64> = (0..30).map(|i| i as f64 / 29.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        for spec in [RegressorSpec::Ridge { alpha: 0.1 }, RegressorSpec::RandomForest(ForestParams::default())] {
            assert_eq!(
                fit_rows(&spec, &rows, &ys, Execution::Sequential).unwrap(),
                fit_with(&spec, &xs, &ys, Execution::Sequential).unwrap()
            );
        }
    }

    #[test]
    fn fit_rows_uses_every_feature() {
        // y depends on the second feature only
        let rows: Vec<Vec<f64>> = (0..60).map(|i| vec![(i % 6) as f64 / 5.0, (i / 30) as f64]).collect();
        let ys: Vec<f64> = rows.iter().map(|r| 0.2 + 0.5 * r[1]).collect();
        let ols = fit_rows(&RegressorSpec::Ols, &rows, &ys, Execution::Sequential).unwrap();
        assert_eq!(ols.n_features(), 2);
        assert_abs_diff_eq!(ols.predict_row(&[0.3, 1.0]), 0.7, epsilon = 1e-10);
        let forest = fit_rows(&RegressorSpec::RandomForest(ForestParams::default()), &rows, &ys, Execution::Parallel).unwrap();
        let again = fit_rows(&RegressorSpec::RandomForest(ForestParams::default()), &rows, &ys, Execution::Sequential).unwrap();
        assert_eq!(forest, again);
        assert_abs_diff_eq!(forest.predict_row(&[0.3, 0.0]), 0.2, epsilon = 1e-12);
        assert!(mse_rows(&forest, &rows, &ys).unwrap() < 1e-20);
        let back: FittedRegressor = serde_json::from_str(&serde_json::to_string(&forest).unwrap()).unwrap();
        assert_eq!(back, forest);
    }

    fn well_conditioned() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        prop::collection::vec((0.0f64..1.0, -1.0f64..1.0), 3..40).prop_filter_map("spread", |pts| {
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (hi - lo > 0.1).then_some((xs, ys))
        })
    }

    proptest! {
        #[test]
        fn ridge_zero_is_ols((xs, ys) in well_conditioned()) {
            let ols = fit(&RegressorSpec::Ols, &xs, &ys).unwrap().linear_params().unwrap();
            let ridge = fit(&RegressorSpec::Ridge { alpha: 0.0 }, &xs, &ys).unwrap().linear_params().unwrap();
            prop_assert!((ols.0 - ridge.0).abs() <= 1e-8);
            prop_assert!((ols.1 - ridge.1).abs() <= 1e-8);
        }

        #[test]
        fn ols_recovers_exact_lines(a in -3.0f64..3.0, b in -2.0f64..2.0, n in 2usize..50) {
            let xs: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
            let ys: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let (slope, intercept) = fit(&RegressorSpec::Ols, &xs, &ys).unwrap().linear_params().unwrap();
            prop_assert!((slope - a).abs() <= 1e-10);
            prop_assert!((intercept - b).abs() <= 1e-10);
        }

        #[test]
        fn lasso_shrinks_and_descends((xs, ys) in well_conditioned(), alpha in 0.0f64..0.5) {
            let sol = lasso_coordinate_descent(&xs, &ys, alpha, LASSO_TOLERANCE, LASSO_MAX_SWEEPS).unwrap();
            for w in sol.objective_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-15 * w[0].abs().max(1.0));
            }
            let ols = fit(&RegressorSpec::Ols, &xs, &ys).unwrap().linear_params().unwrap();
            prop_assert!(sol.slope.abs() <= ols.0.abs() + 1e-9);
        }

        #[test]
        fn forest_bounded_and_seeded((xs, ys) in well_conditioned(), seed in 0u64..1000, probe in -1.0f64..2.0) {
            let spec = RegressorSpec::RandomForest(ForestParams { n_trees: 8, seed, ..ForestParams::default() });
            let a = fit_with(&spec, &xs, &ys, Execution::Parallel).unwrap();
            let b = fit_with(&spec, &xs, &ys, Execution::Sequential).unwrap();
            prop_assert_eq!(&a, &b);
            let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p = a.predict(probe);
            prop_assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
        }
    }
}
