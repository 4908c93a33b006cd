//! Deterministic stand-in for a language model.
//!
//! The mock looks up the gold distribution for the request's (question,
//! group), distorts it, and renders the result in whatever shape the prompt
//! asked for: a bracketed percentage list, a single sampled choice, or a
//! table of per-choice log-probabilities.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Backend, CachedCompletion, CallError, CompletionRequest, ProviderError, ResponseFormat};
use crate::ingest::GoldTable;
use crate::opinion::{GroupKey, NegativePolicy, OpinionDistribution};
use crate::seed::SeedMixer;

/// Lower clip applied before the power step.
pub const PRE_POWER_FLOOR: f64 = 1e-6;
const CDF_CLAMP: f64 = 1e-9;

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockDistortion {
    /// Sharpening exponent; values above 1 exaggerate the mode.
    pub gamma: f64,
    pub noise_scale: f64,
    pub seed: u64,
    #[serde(default = "one")]
    pub affine_scale: f64,
    #[serde(default)]
    pub affine_shift: f64,
    /// Pushes a group's answers away from the all-respondents answers.
    #[serde(default = "one")]
    pub group_exaggeration: f64,
    /// Probability that a generated answer is unparsable.
    #[serde(default)]
    pub garble_rate: f64,
}

impl MockDistortion {
    pub fn identity(seed: u64) -> Self {
        MockDistortion {
            gamma: 1.0,
            noise_scale: 0.0,
            seed,
            affine_scale: 1.0,
            affine_shift: 0.0,
            group_exaggeration: 1.0,
            garble_rate: 0.0,
        }
    }

    pub fn sharpen(gamma: f64, noise_scale: f64, seed: u64) -> Self {
        MockDistortion {
            gamma,
            noise_scale,
            ..Self::identity(seed)
        }
    }

    pub fn affine(scale: f64, shift: f64, noise_scale: f64, seed: u64) -> Self {
        MockDistortion {
            affine_scale: scale,
            affine_shift: shift,
            noise_scale,
            ..Self::identity(seed)
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        let bad = |m: &str| Err(ProviderError::InvalidConfig(m.to_string()));
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return bad("gamma must be > 0");
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return bad("noise_scale must be >= 0");
        }
        if !(self.affine_scale.is_finite() && self.affine_shift.is_finite()) {
            return bad("affine parameters must be finite");
        }
        if !(self.group_exaggeration.is_finite() && self.group_exaggeration >= 0.0) {
            return bad("group_exaggeration must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.garble_rate) {
            return bad("garble_rate must lie in [0, 1]");
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        self.gamma == 1.0 && self.noise_scale == 0.0 && self.affine_scale == 1.0 && self.affine_shift == 0.0
    }
}

/// Identifies one noise draw.
#[derive(Debug, Clone, Copy)]
pub struct NoiseKey<'a> {
    pub question_id: &'a str,
    pub group: &'a GroupKey,
    pub sample_index: u32,
}

fn mixer(seed: u64, label: &str, key: &NoiseKey<'_>) -> SeedMixer {
    SeedMixer::new(seed)
        .str(label)
        .str(key.question_id)
        .str(&key.group.to_string())
        .u64(u64::from(key.sample_index))
}

/// `renormalize(max(a·g + b + ε, 1e-6)^γ)`; exactly `gold` for the identity distortion.
pub fn mock_distort(gold: &OpinionDistribution, distortion: &MockDistortion, key: &NoiseKey<'_>) -> OpinionDistribution {
    if distortion.is_identity() {
        return gold.clone();
    }
    let mut rng = mixer(distortion.seed, "noise", key).rng();
    let normal = (distortion.noise_scale > 0.0).then(|| Normal::new(0.0, distortion.noise_scale).expect("scale validated"));
    let clip = distortion.noise_scale > 0.0 || distortion.affine_scale != 1.0 || distortion.affine_shift != 0.0;
    let raw: Vec<f64> = gold
        .probs()
        .iter()
        .map(|&g| {
            let mut v = distortion.affine_scale * g + distortion.affine_shift;
            if let Some(n) = &normal {
                v += n.sample(&mut rng);
            }
            if clip {
                v = v.max(PRE_POWER_FLOOR);
            }
            v
        })
        .collect();
    // power in log space, scaled by the largest entry, so large gamma cannot underflow
    let top = raw.iter().cloned().fold(0.0f64, f64::max);
    let powered: Vec<f64> = raw
        .iter()
        .map(|&v| if v <= 0.0 { 0.0 } else { (distortion.gamma * (v / top).ln()).exp() })
        .collect();
    OpinionDistribution::renormalize(&powered, NegativePolicy::ClipToZero).unwrap_or_else(|_| gold.clone())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(CDF_CLAMP, 1.0 - CDF_CLAMP);
    (p / (1.0 - p)).ln()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Scales a group's deviation from the overall distribution by `lambda` in
/// logit-CDF space. `lambda = 1` returns `group` unchanged.
pub fn exaggerate_group(group: &OpinionDistribution, overall: &OpinionDistribution, lambda: f64) -> OpinionDistribution {
    if lambda == 1.0 || group.k() != overall.k() {
        return group.clone();
    }
    let mut cdf: Vec<f64> = group
        .cdf()
        .zip(overall.cdf())
        .map(|(g, a)| sigmoid(logit(a) + lambda * (logit(g) - logit(a))))
        .collect();
    let mut running = 0.0f64;
    for c in cdf.iter_mut() {
        running = running.max(*c);
        *c = running.min(1.0);
    }
    let mut probs = Vec::with_capacity(group.k());
    let mut prev = 0.0;
    for &c in &cdf {
        probs.push(c - prev);
        prev = c;
    }
    probs.push(1.0 - prev);
    OpinionDistribution::renormalize(&probs, NegativePolicy::ClipToZero).unwrap_or_else(|_| group.clone())
}

/// Percentages with at most one decimal, e.g. `[50, 25, 25]` or `[33.3, 66.7]`.
pub fn render_percentages(dist: &OpinionDistribution) -> String {
    let parts: Vec<String> = dist
        .probs()
        .iter()
        .map(|p| {
            let v = (p * 1000.0).round() / 10.0;
            if v.fract() == 0.0 {
                format!("{}", v as i64)
            } else {
                format!("{v:.1}")
            }
        })
        .collect();
    format!("[{}]", parts.join(", "))
}

#[derive(Debug)]
pub struct MockBackend {
    gold: Arc<GoldTable>,
    distortion: MockDistortion,
    model_id: String,
}

impl MockBackend {
    pub fn new(gold: Arc<GoldTable>, distortion: MockDistortion) -> Self {
        MockBackend {
            gold,
            distortion,
            model_id: "mock".into(),
        }
    }

    pub fn with_model_id(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self
    }

    /// The distribution this mock "believes" for one draw.
    pub fn belief(&self, question_id: &str, group: &GroupKey, sample_index: u32) -> Option<OpinionDistribution> {
        let gold = self.gold.distribution(question_id, group)?;
        let base = if group.is_all() {
            gold.clone()
        } else {
            match self.gold.distribution(question_id, &GroupKey::all()) {
                Some(overall) => exaggerate_group(gold, overall, self.distortion.group_exaggeration),
                None => gold.clone(),
            }
        };
        let key = NoiseKey {
            question_id,
            group,
            sample_index,
        };
        Some(mock_distort(&base, &self.distortion, &key))
    }
}

fn prompt_hash(prompt: &str) -> u64 {
    SeedMixer::new(0).str(prompt).finish()
}

impl Backend for MockBackend {
    fn call(&self, request: &CompletionRequest) -> Result<CachedCompletion, CallError> {
        let ctx = request
            .context
            .as_ref()
            .ok_or_else(|| CallError::fatal("mock provider needs a request context"))?;
        let dist = self
            .belief(&ctx.question_id, &ctx.group, request.sample_index)
            .ok_or_else(|| CallError::fatal(format!("no gold for {} / {}", ctx.question_id, ctx.group)))?;
        if dist.k() != ctx.k {
            return Err(CallError::fatal(format!("gold for {} has {} choices, request says {}", ctx.question_id, dist.k(), ctx.k)));
        }
        let key = NoiseKey {
            question_id: &ctx.question_id,
            group: &ctx.group,
            sample_index: request.sample_index,
        };
        let completion = |text: String, logprobs| CachedCompletion {
            text,
            logprobs,
            model_id: self.model_id.clone(),
        };

        if let Some(candidates) = &request.logprobs_for {
            let table = candidates
                .iter()
                .filter_map(|c| {
                    let i: usize = c.trim().parse().ok()?;
                    let p = *dist.probs().get(i.checked_sub(1)?)?;
                    (p > 0.0).then(|| (c.clone(), p.ln()))
                })
                .collect();
            return Ok(completion(String::new(), Some(table)));
        }

        let mut rng = mixer(self.distortion.seed, "sample", &key).u64(prompt_hash(&request.prompt)).rng();
        if self.distortion.garble_rate > 0.0 && rng.random::<f64>() < self.distortion.garble_rate {
            return Ok(completion("I'm not able to give a precise answer to that.".into(), None));
        }
        let text = match ctx.format {
            ResponseFormat::Distribution => render_percentages(&dist),
            ResponseFormat::Choice => {
                let probs = dist.probs();
                let choice = if request.temperature == 0.0 {
                    // first maximum
                    probs
                        .iter()
                        .enumerate()
                        .fold(0, |best, (i, &p)| if p > probs[best] { i } else { best })
                } else {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    probs
                        .iter()
                        .position(|&p| {
                            acc += p;
                            u < acc
                        })
                        .unwrap_or(probs.len() - 1)
                };
                format!("{}", choice + 1)
            }
        };
        Ok(completion(text, None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::GoldEntry;
    use crate::providers::RequestContext;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> OpinionDistribution {
        OpinionDistribution::new(p.to_vec()).unwrap()
    }

    fn key<'a>(group: &'a GroupKey) -> NoiseKey<'a> {
        NoiseKey {
            question_id: "q1",
            group,
            sample_index: 0,
        }
    }

    #[test]
    fn identity_returns_gold_exactly() {
        let g = GroupKey::all();
        let gold = dist(&[0.5, 0.25, 0.25]);
        assert_eq!(mock_distort(&gold, &MockDistortion::identity(9), &key(&g)), gold);
        let zero = dist(&[0.0, 0.3, 0.7]);
        assert_eq!(mock_distort(&zero, &MockDistortion::identity(9), &key(&g)), zero);
    }

    #[test]
    fn large_gamma_approaches_argmax() {
        let g = GroupKey::all();
        let out = mock_distort(&dist(&[0.6, 0.4]), &MockDistortion::sharpen(200.0, 0.0, 0), &key(&g));
        assert!(out.probs()[0] > 1.0 - 1e-12);
    }

    #[test]
    fn symmetric_fixed_point() {
        let g = GroupKey::all();
        let out = mock_distort(&dist(&[0.5, 0.5]), &MockDistortion::sharpen(2.0, 0.0, 0), &key(&g));
        assert_eq!(out.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn noise_is_keyed() {
        let g = GroupKey::all();
        let d = MockDistortion::sharpen(1.0, 0.05, 4);
        let gold = dist(&[0.4, 0.3, 0.2, 0.1]);
        let a = mock_distort(&gold, &d, &key(&g));
        assert_eq!(a, mock_distort(&gold, &d, &key(&g)));
        let other = NoiseKey {
            sample_index: 1,
            ..key(&g)
        };
        assert_ne!(a, mock_distort(&gold, &d, &other));
        let female = GroupKey::new("sex", "female").unwrap();
        assert_ne!(a, mock_distort(&gold, &d, &key(&female)));
    }

    #[test]
    fn percentages_render() {
        assert_eq!(render_percentages(&dist(&[0.5, 0.25, 0.25])), "[50, 25, 25]");
        assert_eq!(render_percentages(&dist(&[1.0 / 3.0, 2.0 / 3.0])), "[33.3, 66.7]");
    }

    #[test]
    fn exaggeration_moves_away_from_overall() {
        let overall = dist(&[0.25, 0.25, 0.25, 0.25]);
        let group = dist(&[0.4, 0.3, 0.2, 0.1]);
        assert_eq!(exaggerate_group(&group, &overall, 1.0), group);
        let far = exaggerate_group(&group, &overall, 2.0);
        assert!(far.probs()[0] > 0.4 && far.probs()[3] < 0.1);
        let same = exaggerate_group(&overall, &overall, 3.0);
        for (a, b) in same.probs().iter().zip(overall.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn backend(distortion: MockDistortion) -> MockBackend {
        let mut table = GoldTable::default();
        table.insert(
            "q1",
            GroupKey::all(),
            GoldEntry {
                distribution: dist(&[0.5, 0.25, 0.25]),
                respondents: 100,
            },
        );
        MockBackend::new(Arc::new(table), distortion)
    }

    fn req(format: ResponseFormat, temperature: f64, sample_index: u32) -> CompletionRequest {
        CompletionRequest {
            prompt: "prompt".into(),
            temperature,
            sample_index,
            logprobs_for: None,
            context: Some(RequestContext {
                question_id: "q1".into(),
                group: GroupKey::all(),
                k: 3,
                format,
            }),
        }
    }

    #[test]
    fn identity_mock_verbalized_text() {
        let b = backend(MockDistortion::identity(0));
        assert_eq!(b.call(&req(ResponseFormat::Distribution, 0.7, 0)).unwrap().text, "[50, 25, 25]");
    }

    #[test]
    fn choice_sampling_and_argmax() {
        let b = backend(MockDistortion::identity(0));
        assert_eq!(b.call(&req(ResponseFormat::Choice, 0.0, 5)).unwrap().text, "1");
        let mut counts = [0usize; 3];
        for i in 0..3000 {
            let t = b.call(&req(ResponseFormat::Choice, 0.7, i)).unwrap().text;
            counts[t.parse::<usize>().unwrap() - 1] += 1;
        }
        let share = counts[0] as f64 / 3000.0;
        assert!((share - 0.5).abs() < 0.04, "{counts:?}");
    }

    #[test]
    fn logprob_table() {
        let b = backend(MockDistortion::identity(0));
        let mut r = req(ResponseFormat::Choice, 0.7, 0);
        r.logprobs_for = Some(vec!["1".into(), "2".into(), "3".into()]);
        let lp = b.call(&r).unwrap().logprobs.unwrap();
        assert!((lp["1"] - 0.5f64.ln()).abs() < 1e-15);
        assert!((lp["3"] - 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn garble_and_missing_context() {
        let b = backend(MockDistortion {
            garble_rate: 1.0,
            ..MockDistortion::identity(0)
        });
        assert!(!b.call(&req(ResponseFormat::Distribution, 0.7, 0)).unwrap().text.contains('['));
        let mut r = req(ResponseFormat::Choice, 0.7, 0);
        r.context = None;
        assert!(b.call(&r).is_err());
    }

    fn arb_dist() -> impl Strategy<Value = OpinionDistribution> {
        prop::collection::vec(0.0f64..1.0, 2..8).prop_filter_map("nonzero", |v| {
            OpinionDistribution::renormalize(&v, NegativePolicy::Reject).ok()
        })
    }

    proptest! {
        #[test]
        fn distortion_output_is_valid(
            gold in arb_dist(),
            gamma in 0.1f64..8.0,
            noise in 0.0f64..0.5,
            a in -1.0f64..2.0,
            b in -0.5f64..0.5,
            lambda in 0.0f64..4.0,
            idx in 0u32..50,
        ) {
            let g = GroupKey::new("age", "18-29").unwrap();
            let d = MockDistortion { gamma, noise_scale: noise, seed: 1, affine_scale: a, affine_shift: b, group_exaggeration: lambda, garble_rate: 0.0 };
            let k = NoiseKey { question_id: "q", group: &g, sample_index: idx };
            let out = mock_distort(&gold, &d, &k);
            prop_assert!(OpinionDistribution::new(out.probs().to_vec()).is_ok());
            let ex = exaggerate_group(&gold, &OpinionDistribution::uniform(gold.k()).unwrap(), lambda);
            prop_assert!(OpinionDistribution::new(ex.probs().to_vec()).is_ok());
        }
    }
}
