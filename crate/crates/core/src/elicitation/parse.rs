//! Extraction of distributions and choices from raw completion text.

use thiserror::Error;

use crate::opinion::{NegativePolicy, OpinionDistribution};

/// Sums in this window are read as percentages.
pub const PERCENT_WINDOW: (f64, f64) = (90.0, 110.0);

/// Why an output was dropped.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Discard {
    #[error("no bracketed list")]
    NoList,
    #[error("expected {expected} values, found {found}")]
    WrongArity { expected: usize, found: usize },
    #[error("non-numeric entry `{0}`")]
    NonNumeric(String),
    #[error("values do not form a distribution")]
    Degenerate,
    #[error("no integer")]
    NoInteger,
    #[error("choice {value} outside [1, {k}]")]
    OutOfRange { value: i64, k: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedVerbalized {
    /// Values as written, before any rescaling.
    pub raw: Vec<f64>,
    pub distribution: OpinionDistribution,
}

/// Reads the first `[...]` list in `text` as a distribution over `k` choices.
pub fn parse_verbalized(text: &str, k: usize) -> Result<ParsedVerbalized, Discard> {
    let open = text.find('[').ok_or(Discard::NoList)?;
    let close = text[open..].find(']').ok_or(Discard::NoList)? + open;
    let body = text[open + 1..close].trim();
    if body.is_empty() {
        return Err(Discard::WrongArity { expected: k, found: 0 });
    }
    let raw = body
        .split(',')
        .map(|part| {
            let token = part.trim().trim_end_matches('%').trim();
            token
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Discard::NonNumeric(part.trim().to_string()))
        })
        .collect::<Result<Vec<f64>, Discard>>()?;
    if raw.len() != k {
        return Err(Discard::WrongArity {
            expected: k,
            found: raw.len(),
        });
    }
    let sum: f64 = raw.iter().sum();
    let scaled: Vec<f64> = if (PERCENT_WINDOW.0..=PERCENT_WINDOW.1).contains(&sum) {
        raw.iter().map(|v| v / 100.0).collect()
    } else {
        raw.clone()
    };
    let distribution = OpinionDistribution::renormalize(&scaled, NegativePolicy::Reject).map_err(|_| Discard::Degenerate)?;
    Ok(ParsedVerbalized { raw, distribution })
}

/// First integer token in `text`, which must lie in `[1, k]`.
pub fn parse_choice(text: &str, k: usize) -> Result<usize, Discard> {
    let bytes = text.as_bytes();
    let start = bytes.iter().position(u8::is_ascii_digit).ok_or(Discard::NoInteger)?;
    let end = bytes[start..]
        .iter()
        .position(|b| !b.is_ascii_digit())
        .map_or(bytes.len(), |e| start + e);
    let negative = start > 0 && bytes[start - 1] == b'-';
    let magnitude: i64 = text[start..end].parse().unwrap_or(i64::MAX);
    let value = if negative { -magnitude } else { magnitude };
    if value < 1 || value as u64 > k as u64 {
        return Err(Discard::OutOfRange { value, k });
    }
    Ok(value as usize)
}
