use super::{check_inputs, RegressorError};

pub const LASSO_TOLERANCE: f64 = 1e-8;
pub const LASSO_MAX_SWEEPS: usize = 10_000;

fn centered_moments(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64, f64), RegressorError> {
    let n = xs.len() as f64;
    let x_mean = xs.iter().sum::<f64>() / n;
    let y_mean = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let dx = x - x_mean;
        sxx += dx * dx;
        sxy += dx * (y - y_mean);
    }
    if xs.iter().all(|&x| x == xs[0]) {
        return Err(RegressorError::DegenerateDesign);
    }
    Ok((x_mean, y_mean, sxx, sxy))
}

/// Closed-form ridge on centered data; `alpha = 0` is ordinary least squares.
pub(super) fn ridge(xs: &[f64], ys: &[f64], alpha: f64) -> Result<(f64, f64), RegressorError> {
    let (x_mean, y_mean, sxx, sxy) = centered_moments(xs, ys)?;
    let slope = sxy / (sxx + xs.len() as f64 * alpha);
    Ok((slope, y_mean - slope * x_mean))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoSolution {
    pub slope: f64,
    pub intercept: f64,
    pub sweeps: usize,
    pub converged: bool,
    /// Objective after each sweep, starting with the initial point.
    pub objective_trace: Vec<f64>,
}

/// `(1/2n)·Σ(y - b - w·x)² + alpha·|w|`
pub fn lasso_objective(xs: &[f64], ys: &[f64], slope: f64, intercept: f64, alpha: f64) -> f64 {
    let n = xs.len() as f64;
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| (y - intercept - slope * x).powi(2))
        .sum();
    rss / (2.0 * n) + alpha * slope.abs()
}

fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Cyclic coordinate descent over (intercept, slope) on the raw feature.
/// Stops when neither parameter moves by more than `tol` in a sweep.
pub fn lasso_coordinate_descent(
    xs: &[f64],
    ys: &[f64],
    alpha: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<LassoSolution, RegressorError> {
    check_inputs(xs, ys, 2)?;
    centered_moments(xs, ys)?;
    let n = xs.len() as f64;
    let x_mean = xs.iter().sum::<f64>() / n;
    let y_mean = ys.iter().sum::<f64>() / n;
    let x_sq = xs.iter().map(|x| x * x).sum::<f64>() / n;
    let xy = xs.iter().zip(ys).map(|(x, y)| x * y).sum::<f64>() / n;

    let mut slope = 0.0;
    let mut intercept = y_mean;
    let mut trace = vec![lasso_objective(xs, ys, slope, intercept, alpha)];
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        sweeps += 1;
        let new_intercept = y_mean - slope * x_mean;
        // (1/n)·Σ x·(y - b) = xy - b·x̄
        let new_slope = soft_threshold(xy - new_intercept * x_mean, alpha) / x_sq;
        let moved = (new_slope - slope).abs().max((new_intercept - intercept).abs());
        slope = new_slope;
        intercept = new_intercept;
        trace.push(lasso_objective(xs, ys, slope, intercept, alpha));
        if moved <= tol {
            converged = true;
            break;
        }
    }
    // final intercept update so it is exact for the returned slope
    intercept = y_mean - slope * x_mean;
    Ok(LassoSolution {
        slope,
        intercept,
        sweeps,
        converged,
        objective_trace: trace,
    })
}
