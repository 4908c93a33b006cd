//! Two-sided paired t-test with Bonferroni correction.
//!
//! The Student-t tail comes from the regularized incomplete beta function,
//! evaluated by Lentz's continued fraction with a Lanczos log-gamma.

use serde::{Deserialize, Serialize};

use super::MetricError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestOutcome {
    Regular,
    /// Every difference is exactly zero: t = 0, p = 1.
    ZeroDifferences,
    /// Differences are constant and nonzero: |t| = inf, p = 0.
    ZeroVarianceDifferences,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    #[serde(with = "lossless_f64")]
    pub t_statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    pub p_bonferroni: f64,
    pub n_comparisons: usize,
    pub mean_difference: f64,
    pub outcome: TestOutcome,
}

impl PairedTestResult {
    /// Re-applies the correction for a different family size.
    pub fn with_comparisons(&self, n_comparisons: usize) -> Self {
        let n_comparisons = n_comparisons.max(1);
        PairedTestResult {
            n_comparisons,
            p_bonferroni: bonferroni(self.p_value, n_comparisons),
            ..self.clone()
        }
    }

    pub fn significant(&self, alpha: f64) -> bool {
        self.p_bonferroni < alpha
    }
}

pub fn bonferroni(p_value: f64, n_comparisons: usize) -> f64 {
    (p_value * n_comparisons as f64).min(1.0)
}

/// Paired test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64], n_comparisons: usize) -> Result<PairedTestResult, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(MetricError::TooFewPairs(a.len()));
    }
    if n_comparisons == 0 {
        return Err(MetricError::NoComparisons);
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len() as f64;
    let df = diffs.len() - 1;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    let scale = diffs.iter().fold(0.0f64, |m, d| m.max(d.abs()));

    let (t, p, outcome) = if scale == 0.0 {
        (0.0, 1.0, TestOutcome::ZeroDifferences)
    } else if sd <= 1e-12 * scale {
        (f64::INFINITY.copysign(mean), 0.0, TestOutcome::ZeroVarianceDifferences)
    } else {
        let t = mean / (sd / n.sqrt());
        (t, student_t_two_sided_p(t, df as f64), TestOutcome::Regular)
    };
    Ok(PairedTestResult {
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: p,
        p_bonferroni: bonferroni(p, n_comparisons),
        n_comparisons,
        mean_difference: mean,
        outcome,
    })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

const LANCZOS_G: f64 = 7.0;
#[allow(clippy::excessive_precision)]
const LANCZOS_COEFFS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEFFS[0];
    for (i, c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// `I_x(a, b)` for `a, b > 0` and `x` in `[0, 1]`.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Writes non-finite values as the strings "inf", "-inf" or "nan".
mod lossless_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("bad float `{other}`"))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(f64::MIN_POSITIVE)
    }

    // Reference tails from an independent statistics package.
    #[test]
    fn t_tail_matches_reference() {
        let cases = [
            (2.0, 5.0, 0.10193947882985828),
            (0.5, 1.0, 0.7048327646991336),
            (10.0, 30.0, 4.5752514082296097e-11),
            (1.3, 100.0, 0.19658946342236613),
        ];
        for (t, df, p) in cases {
            let got = student_t_two_sided_p(t, df);
            assert!(rel_close(got, p, 1e-10), "t={t} df={df}: {got} vs {p}");
        }
    }

    #[test]
    fn incomplete_beta_edges_and_symmetry() {
        assert_eq!(regularized_incomplete_beta(0.0, 2.0, 3.0), 0.0);
        assert_eq!(regularized_incomplete_beta(1.0, 2.0, 3.0), 1.0);
        // I_x(1, 1) = x
        assert!((regularized_incomplete_beta(0.3, 1.0, 1.0) - 0.3).abs() < 1e-14);
        // I_x(a, b) = 1 - I_{1-x}(b, a)
        let lhs = regularized_incomplete_beta(0.37, 2.5, 4.0);
        let rhs = 1.0 - regularized_incomplete_beta(0.63, 4.0, 2.5);
        assert!((lhs - rhs).abs() < 1e-14);
    }

    #[test]
    fn paired_examples() {
        let a = [0.4, 0.5, 0.7];
        let r = paired_t_test(&a, &a, 4).unwrap();
        assert_eq!((r.t_statistic, r.p_value, r.outcome), (0.0, 1.0, TestOutcome::ZeroDifferences));

        let r = paired_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0], 1).unwrap();
        assert_eq!(r.outcome, TestOutcome::ZeroVarianceDifferences);
        assert_eq!(r.p_value, 0.0);
        assert!(r.t_statistic.is_infinite() && r.t_statistic < 0.0);

        assert!((bonferroni(0.01, 5) - 0.05).abs() < 1e-15);
        assert_eq!(bonferroni(0.3, 5), 1.0);

        assert!(matches!(paired_t_test(&[1.0], &[1.0], 1), Err(MetricError::TooFewPairs(1))));
        assert!(matches!(paired_t_test(&[1.0, 2.0], &[1.0], 1), Err(MetricError::LengthMismatch(2, 1))));
    }

    #[test]
    fn infinite_t_survives_json() {
        let r = paired_t_test(&[1.0, 2.0], &[0.0, 1.0], 2).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        let back: PairedTestResult = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
