//! Opinion alignment on an ordinal scale and the significance statistics
//! used to compare calibrated against uncalibrated scores.
//!
//! Alignment is `1 - W1(p, q) / (k - 1)` where `W1` is the 1-Wasserstein
//! distance with unit spacing between consecutive answer choices. Dividing by
//! `k - 1` is the same as rescaling the support to `[0, 1]` first, so scores
//! are comparable across questions with different numbers of choices.

mod stats;

pub use stats::{
    bonferroni, paired_t_test, regularized_incomplete_beta, student_t_two_sided_p, PairedTestResult,
    TestOutcome,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::opinion::OpinionDistribution;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least two pairs, got {0}")]
    TooFewPairs(usize),
    #[error("empty list")]
    EmptyList,
    #[error("n_comparisons must be at least 1")]
    NoComparisons,
}

/// Opinion alignment in `[0, 1]`; tables show it multiplied by 100.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AlignmentScore(f64);

impl AlignmentScore {
    pub fn value(self) -> f64 {
        self.0
    }

    pub fn percent(self) -> f64 {
        self.0 * 100.0
    }
}

impl From<AlignmentScore> for f64 {
    fn from(s: AlignmentScore) -> f64 {
        s.0
    }
}

pub fn opinion_alignment(p: &OpinionDistribution, q: &OpinionDistribution) -> Result<AlignmentScore, MetricError> {
    if p.k() != q.k() {
        return Err(MetricError::LengthMismatch(p.k(), q.k()));
    }
    if p == q {
        return Ok(AlignmentScore(1.0));
    }
    let transport: f64 = p.cdf().zip(q.cdf()).map(|(a, b)| (a - b).abs()).sum();
    let value = 1.0 - transport / (p.k() - 1) as f64;
    Ok(AlignmentScore(value.clamp(0.0, 1.0)))
}

/// Unnormalized minimum transport cost with ground cost `|i - j|`, computed by
/// greedily shipping mass left to right (north-west corner rule, which is
/// optimal in one dimension). Intended as a check on [`opinion_alignment`].
pub fn wasserstein_bruteforce(p: &OpinionDistribution, q: &OpinionDistribution) -> Result<f64, MetricError> {
    if p.k() != q.k() {
        return Err(MetricError::LengthMismatch(p.k(), q.k()));
    }
    let mut supply = p.probs().to_vec();
    let mut demand = q.probs().to_vec();
    let (mut i, mut j) = (0usize, 0usize);
    let mut cost = 0.0;
    let k = supply.len();
    while i < k && j < k {
        let moved = supply[i].min(demand[j]);
        cost += moved * (i as f64 - j as f64).abs();
        supply[i] -= moved;
        demand[j] -= moved;
        if supply[i] <= demand[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    Ok(cost)
}

/// Mean and sample standard deviation (`n - 1` denominator, 0 for one item).
pub fn summarize(scores: &[f64]) -> Result<(f64, f64), MetricError> {
    if scores.is_empty() {
        return Err(MetricError::EmptyList);
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    if scores.len() == 1 {
        return Ok((mean, 0.0));
    }
    let ss: f64 = scores.iter().map(|s| (s - mean).powi(2)).sum();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

pub fn summarize_scores(scores: &[AlignmentScore]) -> Result<(f64, f64), MetricError> {
    let values: Vec<f64> = scores.iter().map(|s| s.0).collect();
    summarize(&values)
}
