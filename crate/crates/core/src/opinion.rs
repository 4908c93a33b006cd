//! Questions, demographic groups and probability distributions over ordinal
//! answer choices.
//!
//! Every other module speaks in terms of [`OpinionDistribution`]: gold human
//! distributions, elicited model distributions and calibrated outputs all use
//! the same type, indexed in the question's listed choice order.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance for "sums to one".
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Post-clip sums at or below this are treated as degenerate.
pub const DEGENERATE_SUM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OpinionError {
    #[error("every count is zero")]
    AllZeroCounts,
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("distribution needs at least two choices, got {0}")]
    TooFewChoices(usize),
    #[error("sum {0} is degenerate after clipping")]
    DegenerateSum(f64),
    #[error("entry {index} is negative ({value})")]
    NegativeEntry { index: usize, value: f64 },
    #[error("entry {index} is not finite")]
    NonFinite { index: usize },
    #[error("empty list")]
    EmptyList,
    #[error("choice index {index} outside [1, {k}]")]
    OutOfRangeIndex { index: i64, k: usize },
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("invalid question {id}: {reason}")]
    InvalidQuestion { id: String, reason: String },
    #[error("invalid group key: attribute and value must be non-empty")]
    InvalidGroup,
}

/// One survey question with its answer choices in ordinal order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyQuestion {
    pub id: String,
    pub dataset: String,
    #[serde(default)]
    pub category: String,
    pub text: String,
    pub choices: Vec<String>,
}

impl SurveyQuestion {
    pub fn k(&self) -> usize {
        self.choices.len()
    }

    pub fn validate(&self) -> Result<(), OpinionError> {
        let invalid = |reason: &str| OpinionError::InvalidQuestion {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.is_empty() {
            return Err(invalid("empty id"));
        }
        if self.choices.len() < 2 {
            return Err(invalid("fewer than two choices"));
        }
        if self.choices.iter().any(|c| c.trim().is_empty()) {
            return Err(invalid("empty choice string"));
        }
        for (i, c) in self.choices.iter().enumerate() {
            if self.choices[..i].contains(c) {
                return Err(invalid("duplicate choice string"));
            }
        }
        Ok(())
    }
}

/// A demographic attribute/value pair, or the all-respondents sentinel.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub attribute: String,
    pub value: String,
}

impl GroupKey {
    pub const ALL: &'static str = "all";

    pub fn new(attribute: impl Into<String>, value: impl Into<String>) -> Result<Self, OpinionError> {
        let key = GroupKey {
            attribute: attribute.into(),
            value: value.into(),
        };
        if key.attribute.trim().is_empty() || key.value.trim().is_empty() {
            return Err(OpinionError::InvalidGroup);
        }
        Ok(key)
    }

    pub fn all() -> Self {
        GroupKey {
            attribute: Self::ALL.to_string(),
            value: Self::ALL.to_string(),
        }
    }

    pub fn is_all(&self) -> bool {
        self.attribute == Self::ALL && self.value == Self::ALL
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_all() {
            f.write_str("all")
        } else {
            write!(f, "{}={}", self.attribute, self.value)
        }
    }
}

/// A probability vector over `k >= 2` ordinal answer choices.
///
/// Entries are non-negative and sum to one within [`SUM_TOLERANCE`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct OpinionDistribution {
    probs: Vec<f64>,
}

impl<'de> Deserialize<'de> for OpinionDistribution {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let probs = Vec::<f64>::deserialize(deserializer)?;
        OpinionDistribution::new(probs).map_err(serde::de::Error::custom)
    }
}

impl OpinionDistribution {
    /// Wraps an already-normalized probability vector, checking the invariants.
    pub fn new(probs: Vec<f64>) -> Result<Self, OpinionError> {
        if probs.len() < 2 {
            return Err(OpinionError::TooFewChoices(probs.len()));
        }
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() {
                return Err(OpinionError::NonFinite { index });
            }
            if value < 0.0 {
                return Err(OpinionError::NegativeEntry { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(OpinionError::NotNormalized(sum));
        }
        Ok(OpinionDistribution { probs })
    }

    pub fn uniform(k: usize) -> Result<Self, OpinionError> {
        if k < 2 {
            return Err(OpinionError::TooFewChoices(k));
        }
        Ok(OpinionDistribution {
            probs: vec![1.0 / k as f64; k],
        })
    }

    /// Relative frequencies of answer counts.
    pub fn from_counts(counts: &[u64]) -> Result<Self, OpinionError> {
        if counts.len() < 2 {
            return Err(OpinionError::LengthMismatch {
                expected: 2,
                actual: counts.len(),
            });
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(OpinionError::AllZeroCounts);
        }
        let total = total as f64;
        Ok(OpinionDistribution {
            probs: counts.iter().map(|&c| c as f64 / total).collect(),
        })
    }

    /// Divides by the sum, optionally clipping negatives to zero first.
    pub fn renormalize(raw: &[f64], policy: NegativePolicy) -> Result<Self, OpinionError> {
        if raw.len() < 2 {
            return Err(OpinionError::TooFewChoices(raw.len()));
        }
        let mut clipped = Vec::with_capacity(raw.len());
        for (index, &value) in raw.iter().enumerate() {
            if !value.is_finite() {
                return Err(OpinionError::NonFinite { index });
            }
            if value < 0.0 {
                match policy {
                    NegativePolicy::Reject => return Err(OpinionError::NegativeEntry { index, value }),
                    NegativePolicy::ClipToZero => clipped.push(0.0),
                }
            } else {
                clipped.push(value);
            }
        }
        let sum: f64 = clipped.iter().sum();
        if sum <= DEGENERATE_SUM {
            return Err(OpinionError::DegenerateSum(sum));
        }
        Ok(OpinionDistribution {
            probs: clipped.into_iter().map(|v| v / sum).collect(),
        })
    }

    /// Entrywise mean of distributions sharing the same `k`.
    pub fn average(distributions: &[OpinionDistribution]) -> Result<Self, OpinionError> {
        let first = distributions.first().ok_or(OpinionError::EmptyList)?;
        let k = first.k();
        let mut acc = vec![0.0; k];
        for d in distributions {
            if d.k() != k {
                return Err(OpinionError::LengthMismatch {
                    expected: k,
                    actual: d.k(),
                });
            }
            for (a, p) in acc.iter_mut().zip(&d.probs) {
                *a += p;
            }
        }
        let n = distributions.len() as f64;
        Ok(OpinionDistribution {
            probs: acc.into_iter().map(|a| a / n).collect(),
        })
    }

    /// Empirical distribution of 1-based choice indices.
    pub fn from_samples(choice_indices: &[i64], k: usize) -> Result<Self, OpinionError> {
        if k < 2 {
            return Err(OpinionError::TooFewChoices(k));
        }
        if choice_indices.is_empty() {
            return Err(OpinionError::EmptyList);
        }
        let mut counts = vec![0u64; k];
        for &index in choice_indices {
            if index < 1 || index as usize > k {
                return Err(OpinionError::OutOfRangeIndex { index, k });
            }
            counts[index as usize - 1] += 1;
        }
        Self::from_counts(&counts)
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    /// Cumulative distribution over the first `k - 1` choices.
    pub fn cdf(&self) -> impl Iterator<Item = f64> + '_ {
        self.probs[..self.probs.len() - 1].iter().scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePolicy {
    Reject,
    #[default]
    ClipToZero,
}

/// How a distribution was elicited from a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ElicitationMethod {
    Verbalized,
    SelfRandom,
    Paraphrase,
    Logprob,
}

impl ElicitationMethod {
    pub const ALL: [ElicitationMethod; 4] = [
        ElicitationMethod::Verbalized,
        ElicitationMethod::SelfRandom,
        ElicitationMethod::Paraphrase,
        ElicitationMethod::Logprob,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ElicitationMethod::Verbalized => "verbalized",
            ElicitationMethod::SelfRandom => "self-random",
            ElicitationMethod::Paraphrase => "paraphrase",
            ElicitationMethod::Logprob => "logprob",
        }
    }
}

impl fmt::Display for ElicitationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ElicitationMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown elicitation method `{s}`"))
    }
}

/// Whether the prompt carries sociodemographic context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Base,
    Sd,
}

impl PromptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Base => "base",
            PromptKind::Sd => "sd",
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PromptKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(PromptKind::Base),
            "sd" => Ok(PromptKind::Sd),
            _ => Err(format!("unknown prompt kind `{s}`")),
        }
    }
}

/// (model, method, prompt kind) triple identifying how a distribution was produced.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Setting {
    pub model_id: String,
    pub method: ElicitationMethod,
    pub prompt_kind: PromptKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Gold,
    Elicited,
    Calibrated,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DistributionKey {
    pub question_id: String,
    pub group: GroupKey,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub setting: Option<Setting>,
}

impl DistributionKey {
    pub fn gold(question_id: impl Into<String>, group: GroupKey) -> Self {
        DistributionKey {
            question_id: question_id.into(),
            group,
            source: Source::Gold,
            setting: None,
        }
    }

    pub fn elicited(question_id: impl Into<String>, group: GroupKey, setting: Setting) -> Self {
        DistributionKey {
            question_id: question_id.into(),
            group,
            source: Source::Elicited,
            setting: Some(setting),
        }
    }

    /// Gold keys carry no setting; every other source carries one.
    pub fn is_consistent(&self) -> bool {
        match self.source {
            Source::Gold => self.setting.is_none(),
            Source::Elicited | Source::Calibrated => self.setting.is_some(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn assert_probs(d: &OpinionDistribution, expected: &[f64]) {
        assert_eq!(d.k(), expected.len());
        for (a, b) in d.probs().iter().zip(expected) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn from_counts_relative_frequency() {
        assert_probs(&OpinionDistribution::from_counts(&[2, 1, 1]).unwrap(), &[0.5, 0.25, 0.25]);
        assert_probs(&OpinionDistribution::from_counts(&[0, 0, 7]).unwrap(), &[0.0, 0.0, 1.0]);
        assert_eq!(
            OpinionDistribution::from_counts(&[0, 0, 0]),
            Err(OpinionError::AllZeroCounts)
        );
        assert!(matches!(
            OpinionDistribution::from_counts(&[3]),
            Err(OpinionError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn renormalize_examples() {
        let d = OpinionDistribution::renormalize(&[0.7, 0.2, 0.05, 0.05], NegativePolicy::Reject).unwrap();
        assert_probs(&d, &[0.7, 0.2, 0.05, 0.05]);
        let d = OpinionDistribution::renormalize(&[2.0, 1.0, 1.0], NegativePolicy::ClipToZero).unwrap();
        assert_probs(&d, &[0.5, 0.25, 0.25]);
        assert!(matches!(
            OpinionDistribution::renormalize(&[-0.1, 0.0, 0.0], NegativePolicy::ClipToZero),
            Err(OpinionError::DegenerateSum(_))
        ));
        assert!(matches!(
            OpinionDistribution::renormalize(&[-0.1, 0.6, 0.5], NegativePolicy::Reject),
            Err(OpinionError::NegativeEntry { index: 0, .. })
        ));
        assert!(matches!(
            OpinionDistribution::renormalize(&[0.5, f64::NAN], NegativePolicy::ClipToZero),
            Err(OpinionError::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn average_examples() {
        let a = OpinionDistribution::new(vec![1.0, 0.0]).unwrap();
        let b = OpinionDistribution::new(vec![0.0, 1.0]).unwrap();
        assert_probs(&OpinionDistribution::average(&[a, b]).unwrap(), &[0.5, 0.5]);

        let half = OpinionDistribution::new(vec![0.5, 0.5]).unwrap();
        assert_probs(&OpinionDistribution::average(&[half]).unwrap(), &[0.5, 0.5]);

        // (0.7 + 0.5 + 0.6) / 3 = 0.6 and (0.3 + 0.5 + 0.4) / 3 = 0.4
        let ds: Vec<_> = [[0.7, 0.3], [0.5, 0.5], [0.6, 0.4]]
            .iter()
            .map(|p| OpinionDistribution::new(p.to_vec()).unwrap())
            .collect();
        assert_probs(&OpinionDistribution::average(&ds).unwrap(), &[0.6, 0.4]);

        assert_eq!(OpinionDistribution::average(&[]), Err(OpinionError::EmptyList));
        let three = OpinionDistribution::uniform(3).unwrap();
        let two = OpinionDistribution::uniform(2).unwrap();
        assert!(matches!(
            OpinionDistribution::average(&[three, two]),
            Err(OpinionError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn from_samples_examples() {
        assert_probs(
            &OpinionDistribution::from_samples(&[4, 4, 3, 4, 1], 4).unwrap(),
            &[0.2, 0.0, 0.2, 0.6],
        );
        assert_probs(&OpinionDistribution::from_samples(&[1], 3).unwrap(), &[1.0, 0.0, 0.0]);
        assert_probs(&OpinionDistribution::from_samples(&[2; 5], 2).unwrap(), &[0.0, 1.0]);
        assert!(matches!(
            OpinionDistribution::from_samples(&[0, 1], 2),
            Err(OpinionError::OutOfRangeIndex { index: 0, k: 2 })
        ));
        assert_eq!(OpinionDistribution::from_samples(&[], 2), Err(OpinionError::EmptyList));
    }

    #[test]
    fn question_validation() {
        let mut q = SurveyQuestion {
            id: "q1".into(),
            dataset: "D".into(),
            category: "c".into(),
            text: "?".into(),
            choices: vec!["yes".into(), "no".into()],
        };
        assert!(q.validate().is_ok());
        q.choices.push("yes".into());
        assert!(q.validate().is_err());
        q.choices = vec!["only".into()];
        assert!(q.validate().is_err());
        q.choices = vec!["a".into(), " ".into()];
        assert!(q.validate().is_err());
    }

    #[test]
    fn group_keys_and_distribution_keys() {
        assert!(GroupKey::all().is_all());
        assert_eq!(GroupKey::new("", "x"), Err(OpinionError::InvalidGroup));
        let g = GroupKey::new("age", "30-49").unwrap();
        assert_eq!(g.to_string(), "age=30-49");
        assert!(DistributionKey::gold("q", g.clone()).is_consistent());
        let setting = Setting {
            model_id: "m".into(),
            method: ElicitationMethod::Verbalized,
            prompt_kind: PromptKind::Sd,
        };
        assert!(DistributionKey::elicited("q", g, setting).is_consistent());
    }

    #[test]
    fn deserialize_checks_invariants() {
        assert!(serde_json::from_str::<OpinionDistribution>("[0.5, 0.5]").is_ok());
        assert!(serde_json::from_str::<OpinionDistribution>("[0.5, 0.6]").is_err());
    }

    fn raw_vector() -> impl Strategy<Value = Vec<f64>> {
        (2usize..8).prop_flat_map(|k| prop::collection::vec(-0.5f64..2.0, k))
    }

    proptest! {
        #[test]
        fn from_counts_is_valid(counts in prop::collection::vec(0u64..50, 2..10)) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            let d = OpinionDistribution::from_counts(&counts).unwrap();
            let sum: f64 = d.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() <= SUM_TOLERANCE);
            prop_assert!(d.probs().iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn renormalize_idempotent_and_ratio_preserving(raw in raw_vector()) {
            let Ok(once) = OpinionDistribution::renormalize(&raw, NegativePolicy::ClipToZero) else {
                return Ok(());
            };
            let twice = OpinionDistribution::renormalize(once.probs(), NegativePolicy::ClipToZero).unwrap();
            for (a, b) in once.probs().iter().zip(twice.probs()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            let clipped: Vec<f64> = raw.iter().map(|&v| v.max(0.0)).collect();
            for i in 0..raw.len() {
                for j in 0..raw.len() {
                    if clipped[j] > 1e-6 {
                        let lhs = once.probs()[i] / once.probs()[j];
                        let rhs = clipped[i] / clipped[j];
                        prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(1.0));
                    }
                }
            }
        }

        #[test]
        fn average_is_valid_and_order_free(seed_counts in prop::collection::vec(prop::collection::vec(1u64..20, 4), 1..6)) {
            let ds: Vec<_> = seed_counts.iter().map(|c| OpinionDistribution::from_counts(c).unwrap()).collect();
            let avg = OpinionDistribution::average(&ds).unwrap();
            let mut reversed = ds.clone();
            reversed.reverse();
            let avg_rev = OpinionDistribution::average(&reversed).unwrap();
            let sum: f64 = avg.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() <= SUM_TOLERANCE);
            for (a, b) in avg.probs().iter().zip(avg_rev.probs()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn from_samples_multiples_of_one_over_n(samples in prop::collection::vec(1i64..=5, 1..30)) {
            let n = samples.len() as f64;
            let d = OpinionDistribution::from_samples(&samples, 5).unwrap();
            for p in d.probs() {
                let scaled = p * n;
                prop_assert!((scaled - scaled.round()).abs() <= 1e-9);
            }
        }
    }
}
