//! Synthetic survey worlds with known ground truth.
//!
//! Gold answers follow a logistic ordinal model: respondent with demographic
//! combination `v` answers `j` or lower with probability
//! `sigmoid(c_j - eta)`, where `eta = mu_q + beta * sum_a e[q, a, v_a]`.
//! Respondents cycle through every combination of attribute values so each
//! value group has the same population, and the exact group distribution is
//! the average of the combination distributions it contains.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{GoldEntry, GoldFile, GoldTable, RespondentRecord};
use crate::opinion::{GroupKey, OpinionDistribution, SurveyQuestion};
use crate::providers::MockDistortion;
use crate::seed::SeedMixer;

pub const MIN_K: usize = 2;
pub const MAX_K: usize = 7;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("unknown benchmark case `{0}`")]
    UnknownCase(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn io_error(path: &Path, e: impl fmt::Display) -> SynthError {
    SynthError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub values: Vec<String>,
}

impl AttributeSpec {
    pub fn new(name: &str, values: &[&str]) -> Self {
        AttributeSpec {
            name: name.into(),
            values: values.iter().map(|v| v.to_string()).collect(),
        }
    }
}

fn d_datasets() -> usize {
    3
}
fn d_questions() -> usize {
    40
}
fn d_k() -> usize {
    4
}
fn d_beta() -> f64 {
    0.8
}
fn d_respondents() -> usize {
    500
}
fn d_attributes() -> Vec<AttributeSpec> {
    vec![
        AttributeSpec::new("age", &["18-29", "30-49", "50+"]),
        AttributeSpec::new("income", &["low", "middle", "high"]),
        AttributeSpec::new("region", &["north", "central", "south"]),
    ]
}
fn d_location_scale() -> f64 {
    1.0
}
fn d_cut_spacing() -> f64 {
    1.0
}
fn d_categories() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "d_datasets")]
    pub n_datasets: usize,
    #[serde(default = "d_questions")]
    pub n_questions: usize,
    #[serde(default = "d_k")]
    pub k_min: usize,
    #[serde(default = "d_k")]
    pub k_max: usize,
    #[serde(default = "d_attributes")]
    pub attributes: Vec<AttributeSpec>,
    /// How strongly demographics move the latent location.
    #[serde(default = "d_beta")]
    pub beta: f64,
    /// Minimum respondents per (question, value group).
    #[serde(default = "d_respondents")]
    pub respondents_per_group: usize,
    #[serde(default)]
    pub seed: u64,
    /// Spread of per-question locations.
    #[serde(default = "d_location_scale")]
    pub location_scale: f64,
    /// Distance between consecutive cutpoints.
    #[serde(default = "d_cut_spacing")]
    pub cut_spacing: f64,
    #[serde(default = "d_categories")]
    pub n_categories: usize,
    /// Defaults to `synth-a`, `synth-b`, ...
    #[serde(default)]
    pub dataset_names: Vec<String>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_datasets: d_datasets(),
            n_questions: d_questions(),
            k_min: d_k(),
            k_max: d_k(),
            attributes: d_attributes(),
            beta: d_beta(),
            respondents_per_group: d_respondents(),
            seed: 0,
            location_scale: d_location_scale(),
            cut_spacing: d_cut_spacing(),
            n_categories: d_categories(),
            dataset_names: Vec::new(),
        }
    }
}

impl SyntheticSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, SynthError> {
        let spec: SyntheticSpec = toml::from_str(text).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.n_datasets == 0 || self.n_questions == 0 || self.respondents_per_group == 0 || self.n_categories == 0 {
            return bad("counts must be >= 1".into());
        }
        if !(MIN_K <= self.k_min && self.k_min <= self.k_max && self.k_max <= MAX_K) {
            return bad(format!("k range must lie in [{MIN_K}, {MAX_K}]"));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be >= 0".into());
        }
        if !(self.location_scale.is_finite() && self.location_scale >= 0.0 && self.cut_spacing.is_finite() && self.cut_spacing > 0.0) {
            return bad("location_scale must be >= 0 and cut_spacing > 0".into());
        }
        for a in &self.attributes {
            if a.name.trim().is_empty() || a.name == GroupKey::ALL || a.values.is_empty() {
                return bad(format!("attribute `{}` needs a name and values", a.name));
            }
            if a.name.contains(',') || a.values.iter().any(|v| v.trim().is_empty() || v.contains(',')) {
                return bad(format!("attribute `{}` has an empty or comma-containing name/value", a.name));
            }
        }
        if !self.dataset_names.is_empty() && self.dataset_names.len() != self.n_datasets {
            return bad("dataset_names must list one name per dataset".into());
        }
        Ok(())
    }

    pub fn dataset_name(&self, i: usize) -> String {
        self.dataset_names.get(i).cloned().unwrap_or_else(|| {
            let letter = (b'a' + (i % 26) as u8) as char;
            if i < 26 {
                format!("synth-{letter}")
            } else {
                format!("synth-{letter}{}", i / 26)
            }
        })
    }

    fn combinations(&self) -> usize {
        self.attributes.iter().map(|a| a.values.len()).product()
    }

    /// Respondents per question: a whole number of passes over every
    /// combination, enough that each value group reaches the minimum.
    pub fn respondents_per_question(&self) -> usize {
        let combos = self.combinations();
        let max_values = self.attributes.iter().map(|a| a.values.len()).max().unwrap_or(1);
        let needed = self.respondents_per_group * max_values;
        needed.div_ceil(combos) * combos
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Logistic ordinal distribution with evenly spaced, centered cutpoints.
pub fn ordinal_distribution(eta: f64, k: usize, cut_spacing: f64) -> Vec<f64> {
    let mid = k as f64 / 2.0;
    let mut probs = Vec::with_capacity(k);
    let mut prev = 0.0;
    for j in 1..k {
        let c = sigmoid(cut_spacing * (j as f64 - mid) - eta);
        probs.push(c - prev);
        prev = c;
    }
    probs.push(1.0 - prev);
    probs
}

const LIKERT: [&[&str]; 6] = [
    &["Yes", "No"],
    &["Agree", "Neutral", "Disagree"],
    &["A great deal", "Quite a lot", "Not very much", "None at all"],
    &["Strongly agree", "Agree", "Neither agree nor disagree", "Disagree", "Strongly disagree"],
    &["Always", "Very often", "Often", "Sometimes", "Rarely", "Never"],
    &[
        "Strongly agree",
        "Agree",
        "Somewhat agree",
        "Neutral",
        "Somewhat disagree",
        "Disagree",
        "Strongly disagree",
    ],
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub name: String,
    pub questions: Vec<SurveyQuestion>,
    pub respondents: Vec<RespondentRecord>,
    /// Exact population distributions for every value group and `all`.
    pub hidden_gold: GoldTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub spec: SyntheticSpec,
    pub datasets: Vec<SyntheticDataset>,
}

/// Mixed-radix decode of combination `c` into one value index per attribute.
fn decode(mut c: usize, radices: &[usize]) -> Vec<usize> {
    radices
        .iter()
        .map(|&r| {
            let v = c % r;
            c /= r;
            v
        })
        .collect()
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn generate_dataset(spec: &SyntheticSpec, index: usize) -> SyntheticDataset {
    let name = spec.dataset_name(index);
    let radices: Vec<usize> = spec.attributes.iter().map(|a| a.values.len()).collect();
    let combos = spec.combinations();
    let per_question = spec.respondents_per_question();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let mut questions = Vec::with_capacity(spec.n_questions);
    let mut respondents = Vec::with_capacity(spec.n_questions * per_question);
    let mut hidden_gold = GoldTable::default();

    for qi in 0..spec.n_questions {
        let id = format!("{name}-q{:03}", qi + 1);
        let mut rng = SeedMixer::new(spec.seed).str("synth").str(&name).u64(qi as u64).rng();
        let k = rng.random_range(spec.k_min..=spec.k_max);
        let mu = spec.location_scale * unit.sample(&mut rng);
        // centered per-value effects so the attribute does not move the overall mean
        let effects: Vec<Vec<f64>> = radices
            .iter()
            .map(|&r| {
                let raw: Vec<f64> = (0..r).map(|_| unit.sample(&mut rng)).collect();
                let mean = raw.iter().sum::<f64>() / r as f64;
                raw.into_iter().map(|e| e - mean).collect()
            })
            .collect();
        let combo_probs: Vec<Vec<f64>> = (0..combos)
            .map(|c| {
                let values = decode(c, &radices);
                let shift: f64 = values.iter().enumerate().map(|(a, &v)| effects[a][v]).sum();
                ordinal_distribution(mu + spec.beta * shift, k, spec.cut_spacing)
            })
            .collect();

        let average = |members: &[usize]| -> OpinionDistribution {
            // running mean: stays bit-exact when every member is identical
            let mut probs = vec![0.0; k];
            for (i, &c) in members.iter().enumerate() {
                for (m, p) in probs.iter_mut().zip(&combo_probs[c]) {
                    *m += (p - *m) / (i + 1) as f64;
                }
            }
            OpinionDistribution::renormalize(&probs, crate::opinion::NegativePolicy::ClipToZero).expect("mixture is valid")
        };
        let all: Vec<usize> = (0..combos).collect();
        hidden_gold.insert(
            &id,
            GroupKey::all(),
            GoldEntry {
                distribution: average(&all),
                respondents: per_question as u64,
            },
        );
        for (a, attr) in spec.attributes.iter().enumerate() {
            for (v, value) in attr.values.iter().enumerate() {
                let members: Vec<usize> = all.iter().copied().filter(|&c| decode(c, &radices)[a] == v).collect();
                hidden_gold.insert(
                    &id,
                    GroupKey::new(attr.name.as_str(), value.as_str()).expect("validated"),
                    GoldEntry {
                        distribution: average(&members),
                        respondents: (per_question / attr.values.len()) as u64,
                    },
                );
            }
        }

        for r in 0..per_question {
            let c = r % combos;
            let values = decode(c, &radices);
            let choice = sample_index(&combo_probs[c], rng.random::<f64>());
            respondents.push(RespondentRecord {
                question_id: id.clone(),
                choice_index: choice as i64 + 1,
                demographics: spec
                    .attributes
                    .iter()
                    .zip(&values)
                    .map(|(attr, &v)| (attr.name.clone(), attr.values[v].clone()))
                    .collect(),
            });
        }

        questions.push(SurveyQuestion {
            id,
            dataset: name.clone(),
            category: format!("topic-{}", qi % spec.n_categories + 1),
            text: format!("Synthetic survey item {} of {name}: how do you feel about statement {}?", qi + 1, qi + 1),
            choices: LIKERT[k - MIN_K].iter().map(|s| s.to_string()).collect(),
        });
    }
    SyntheticDataset {
        name,
        questions,
        respondents,
        hidden_gold,
    }
}

pub fn generate_world(spec: &SyntheticSpec) -> Result<SyntheticWorld, SynthError> {
    spec.validate()?;
    Ok(SyntheticWorld {
        spec: spec.clone(),
        datasets: (0..spec.n_datasets).map(|i| generate_dataset(spec, i)).collect(),
    })
}

/// File names inside one dataset directory.
pub const QUESTIONS_FILE: &str = "questions.json";
pub const RESPONDENTS_FILE: &str = "respondents.csv";
pub const HIDDEN_GOLD_FILE: &str = "hidden_gold.json";

/// Writes `<dir>/<dataset>/{questions.json, respondents.csv, hidden_gold.json}`
/// and `<dir>/synth.toml`.
pub fn write_world(world: &SyntheticWorld, dir: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let spec_path = dir.join("synth.toml");
    let spec_text = toml::to_string(&world.spec).map_err(|e| io_error(&spec_path, e))?;
    std::fs::write(&spec_path, spec_text).map_err(|e| io_error(&spec_path, e))?;
    for ds in &world.datasets {
        let sub = dir.join(&ds.name);
        std::fs::create_dir_all(&sub).map_err(|e| io_error(&sub, e))?;
        let qpath = sub.join(QUESTIONS_FILE);
        let text = serde_json::to_string_pretty(&ds.questions).expect("questions serialize");
        std::fs::write(&qpath, text).map_err(|e| io_error(&qpath, e))?;

        let rpath = sub.join(RESPONDENTS_FILE);
        let mut writer = csv::Writer::from_path(&rpath).map_err(|e| io_error(&rpath, e))?;
        let mut header = vec!["question_id".to_string(), "choice_index".to_string()];
        header.extend(world.spec.attributes.iter().map(|a| a.name.clone()));
        writer.write_record(&header).map_err(|e| io_error(&rpath, e))?;
        for r in &ds.respondents {
            let mut row = vec![r.question_id.clone(), r.choice_index.to_string()];
            row.extend(
                world
                    .spec
                    .attributes
                    .iter()
                    .map(|a| r.demographics.get(&a.name).cloned().unwrap_or_default()),
            );
            writer.write_record(&row).map_err(|e| io_error(&rpath, e))?;
        }
        writer.flush().map_err(|e| io_error(&rpath, e))?;

        let gpath = sub.join(HIDDEN_GOLD_FILE);
        GoldFile::new(&ds.questions, &ds.hidden_gold)
            .write(&gpath)
            .map_err(|e| io_error(&gpath, e))?;
    }
    Ok(())
}

/// Named distortion scenarios for the synthetic benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "case", rename_all = "kebab-case")]
pub enum BenchmarkCase {
    Identity,
    Sharpen { gamma: f64, noise: f64 },
    AffineNoise { a: f64, b: f64, sigma: f64 },
    GroupExaggerate { lambda: f64 },
}

impl fmt::Display for BenchmarkCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchmarkCase::Identity => f.write_str("identity"),
            BenchmarkCase::Sharpen { gamma, noise } => write!(f, "sharpen({gamma},{noise})"),
            BenchmarkCase::AffineNoise { a, b, sigma } => write!(f, "affine-noise({a},{b},{sigma})"),
            BenchmarkCase::GroupExaggerate { lambda } => write!(f, "group-exaggerate({lambda})"),
        }
    }
}

impl std::str::FromStr for BenchmarkCase {
    type Err = SynthError;

    /// `identity`, `sharpen(2)`, `sharpen(2,0.05)`, `affine-noise(0.5,0.125,0.05)`,
    /// `group-exaggerate(2)`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || SynthError::UnknownCase(s.to_string());
        let s = s.trim();
        let (name, args) = match s.split_once('(') {
            Some((name, rest)) => (name.trim(), rest.strip_suffix(')').ok_or_else(unknown)?),
            None => (s, ""),
        };
        let nums: Vec<f64> = if args.trim().is_empty() {
            Vec::new()
        } else {
            args.split(',')
                .map(|a| a.trim().parse::<f64>().map_err(|_| unknown()))
                .collect::<Result<_, _>>()?
        };
        match (name, nums.as_slice()) {
            ("identity", []) => Ok(BenchmarkCase::Identity),
            ("sharpen", [gamma]) => Ok(BenchmarkCase::Sharpen {
                gamma: *gamma,
                noise: 0.05,
            }),
            ("sharpen", [gamma, noise]) => Ok(BenchmarkCase::Sharpen {
                gamma: *gamma,
                noise: *noise,
            }),
            ("affine-noise", [a, b, sigma]) => Ok(BenchmarkCase::AffineNoise {
                a: *a,
                b: *b,
                sigma: *sigma,
            }),
            ("group-exaggerate", [lambda]) => Ok(BenchmarkCase::GroupExaggerate { lambda: *lambda }),
            _ => Err(unknown()),
        }
    }
}

/// What a case is expected to do to alignment, in alignment points (x100).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub description: String,
    /// Mean improvement must be at least this.
    #[serde(default)]
    pub min_improvement: Option<f64>,
    /// |mean improvement| must be at most this.
    #[serde(default)]
    pub max_abs_improvement: Option<f64>,
    /// Fraction of the uncalibrated gap (100 - before) that calibration must close.
    #[serde(default)]
    pub min_gap_recovered: Option<f64>,
    /// Calibrated spread across groups must not exceed uncalibrated spread.
    #[serde(default)]
    pub group_std_not_worse: bool,
}

impl Expectation {
    /// Checks observed mean alignments (in points) against the bundle.
    pub fn check(&self, before: f64, after: f64) -> Result<(), String> {
        let delta = after - before;
        if let Some(min) = self.min_improvement {
            if delta < min {
                return Err(format!("improvement {delta:.3} < {min}"));
            }
        }
        if let Some(max) = self.max_abs_improvement {
            if delta.abs() > max {
                return Err(format!("|improvement| {:.3} > {max}", delta.abs()));
            }
        }
        if let Some(frac) = self.min_gap_recovered {
            let gap = 100.0 - before;
            if gap > 0.0 && delta < frac * gap {
                return Err(format!("recovered {delta:.3} of a {gap:.3} gap, need {frac}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkBundle {
    pub case: BenchmarkCase,
    pub distortion: MockDistortion,
    pub expectation: Expectation,
}

pub fn benchmark_case(case: BenchmarkCase, seed: u64) -> Result<BenchmarkBundle, SynthError> {
    let (distortion, expectation) = match case {
        BenchmarkCase::Identity => (
            MockDistortion::identity(seed),
            Expectation {
                description: "nothing to fix: improvement within 0.5 points of zero".into(),
                min_improvement: None,
                max_abs_improvement: Some(0.5),
                min_gap_recovered: None,
                group_std_not_worse: false,
            },
        ),
        BenchmarkCase::Sharpen { gamma, noise } => (
            MockDistortion::sharpen(gamma, noise, seed),
            Expectation {
                description: "sharpened answers: calibration recovers at least half the gap and 5 points".into(),
                min_improvement: Some(5.0),
                max_abs_improvement: None,
                min_gap_recovered: Some(0.5),
                group_std_not_worse: false,
            },
        ),
        BenchmarkCase::AffineNoise { a, b, sigma } => (
            MockDistortion::affine(a, b, sigma, seed),
            Expectation {
                description: "affine distortion: calibration recovers at least half the gap".into(),
                min_improvement: Some(0.0),
                max_abs_improvement: None,
                min_gap_recovered: Some(0.5),
                group_std_not_worse: false,
            },
        ),
        BenchmarkCase::GroupExaggerate { lambda } => (
            MockDistortion {
                group_exaggeration: lambda,
                ..MockDistortion::identity(seed)
            },
            Expectation {
                description: "exaggerated group differences: spread across groups shrinks after calibration".into(),
                min_improvement: None,
                max_abs_improvement: None,
                min_gap_recovered: None,
                group_std_not_worse: true,
            },
        ),
    };
    distortion
        .validate()
        .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    Ok(BenchmarkBundle {
        case,
        distortion,
        expectation,
    })
}

/// Per-group answer counts recovered from respondents, for quick checks.
pub fn tally(respondents: &[RespondentRecord]) -> BTreeMap<(String, GroupKey), Vec<u64>> {
    let mut out: BTreeMap<(String, GroupKey), Vec<u64>> = BTreeMap::new();
    for r in respondents {
        let idx = (r.choice_index - 1) as usize;
        let mut bump = |g: GroupKey| {
            let slot = out.entry((r.question_id.clone(), g)).or_default();
            if slot.len() <= idx {
                slot.resize(idx + 1, 0);
            }
            slot[idx] += 1;
        };
        bump(GroupKey::all());
        for (a, v) in &r.demographics {
            bump(GroupKey {
                attribute: a.clone(),
                value: v.clone(),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{build_gold, load_dataset};

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_datasets: 2,
            n_questions: 6,
            k_min: 2,
            k_max: 7,
            respondents_per_group: 30,
            seed,
            ..SyntheticSpec::default()
        }
    }

    fn tv(p: &OpinionDistribution, q: &OpinionDistribution) -> f64 {
        0.5 * p.probs().iter().zip(q.probs()).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    #[test]
    fn ordinal_shape() {
        let p = ordinal_distribution(0.0, 4, 1.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        // symmetric around the middle when eta = 0
        assert!((p[0] - p[3]).abs() < 1e-15 && (p[1] - p[2]).abs() < 1e-15);
        let high = ordinal_distribution(3.0, 4, 1.0);
        assert!(high[3] > p[3] && high[0] < p[0]);
    }

    #[test]
    fn group_sizes_are_balanced() {
        let spec = SyntheticSpec::default();
        assert_eq!(spec.respondents_per_question(), 1512);
        let world = generate_world(&SyntheticSpec {
            n_datasets: 1,
            n_questions: 2,
            ..spec
        })
        .unwrap();
        let counts = tally(&world.datasets[0].respondents);
        for ((_, g), c) in counts {
            let n: u64 = c.iter().sum();
            if g.is_all() {
                assert_eq!(n, 1512);
            } else {
                assert_eq!(n, 504, "{g}");
            }
        }
    }

    #[test]
    fn zero_beta_makes_groups_identical() {
        let world = generate_world(&SyntheticSpec { beta: 0.0, ..small(3) }).unwrap();
        for ds in &world.datasets {
            for q in &ds.questions {
                let all = ds.hidden_gold.distribution(&q.id, &GroupKey::all()).unwrap();
                for (g, e) in ds.hidden_gold.groups(&q.id) {
                    assert_eq!(&e.distribution, all, "{g}");
                }
            }
        }
    }

    #[test]
    fn hidden_gold_is_the_enumerated_mixture() {
        // brute force: average the combination distributions by hand
        let spec = small(5);
        let world = generate_world(&spec).unwrap();
        let ds = &world.datasets[0];
        let q = &ds.questions[0];
        let counts = tally(&ds.respondents);
        let all = &counts[&(q.id.clone(), GroupKey::all())];
        assert_eq!(all.iter().sum::<u64>() as usize, spec.respondents_per_question());
        for (g, e) in ds.hidden_gold.groups(&q.id) {
            assert_eq!(e.distribution.k(), q.k(), "{g}");
        }
    }

    #[test]
    fn large_samples_converge_to_hidden_gold() {
        let spec = SyntheticSpec {
            n_datasets: 1,
            n_questions: 3,
            k_min: 3,
            k_max: 6,
            respondents_per_group: 100_000,
            seed: 11,
            ..SyntheticSpec::default()
        };
        let world = generate_world(&spec).unwrap();
        let ds = &world.datasets[0];
        let gold = build_gold(&ds.questions, &ds.respondents, 20).unwrap();
        for (q, g, e) in ds.hidden_gold.iter() {
            let ingested = gold.distribution(q, g).unwrap();
            assert!(tv(ingested, &e.distribution) < 0.01, "{q} {g}");
        }
    }

    #[test]
    fn deterministic_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let world = generate_world(&small(9)).unwrap();
        write_world(&world, a.path()).unwrap();
        write_world(&generate_world(&small(9)).unwrap(), b.path()).unwrap();
        for ds in &world.datasets {
            for f in [QUESTIONS_FILE, RESPONDENTS_FILE, HIDDEN_GOLD_FILE] {
                let x = std::fs::read(a.path().join(&ds.name).join(f)).unwrap();
                let y = std::fs::read(b.path().join(&ds.name).join(f)).unwrap();
                assert_eq!(x, y, "{f}");
            }
        }
        assert_ne!(generate_world(&small(10)).unwrap(), world);

        // the written files round-trip through ingestion
        let sub = a.path().join(&world.datasets[0].name);
        let (questions, gold) = load_dataset(&sub.join(QUESTIONS_FILE), &sub.join(RESPONDENTS_FILE), 20).unwrap();
        assert_eq!(questions, world.datasets[0].questions);
        assert_eq!(gold.len(), world.datasets[0].hidden_gold.len());
    }

    #[test]
    fn spec_validation() {
        assert!(SyntheticSpec { k_max: 8, ..SyntheticSpec::default() }.validate().is_err());
        assert!(SyntheticSpec { n_questions: 0, ..SyntheticSpec::default() }.validate().is_err());
        assert!(SyntheticSpec { beta: -1.0, ..SyntheticSpec::default() }.validate().is_err());
        let s = SyntheticSpec::from_toml_str("n_questions = 10\nseed = 4\n").unwrap();
        assert_eq!(s.n_questions, 10);
        assert_eq!(s.attributes.len(), 3);
        assert!(SyntheticSpec::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn cases_parse() {
        assert_eq!("identity".parse::<BenchmarkCase>().unwrap(), BenchmarkCase::Identity);
        assert_eq!(
            "sharpen(2)".parse::<BenchmarkCase>().unwrap(),
            BenchmarkCase::Sharpen { gamma: 2.0, noise: 0.05 }
        );
        assert_eq!(
            "affine-noise(0.5, 0.125, 0)".parse::<BenchmarkCase>().unwrap(),
            BenchmarkCase::AffineNoise { a: 0.5, b: 0.125, sigma: 0.0 }
        );
        for bad in ["", "sharpen", "sharpen(x)", "melt(1)", "identity(1)"] {
            assert!(matches!(bad.parse::<BenchmarkCase>(), Err(SynthError::UnknownCase(_))), "{bad}");
        }
        let b = benchmark_case(BenchmarkCase::Sharpen { gamma: 2.0, noise: 0.05 }, 1).unwrap();
        assert_eq!(b.distortion.gamma, 2.0);
        assert!(b.expectation.check(80.0, 90.0).is_ok());
        assert!(b.expectation.check(80.0, 84.0).is_err());
        let id = benchmark_case(BenchmarkCase::Identity, 1).unwrap();
        assert!(id.expectation.check(99.0, 99.3).is_ok());
        assert!(id.expectation.check(99.0, 98.0).is_err());
        assert!(benchmark_case(BenchmarkCase::Sharpen { gamma: -1.0, noise: 0.0 }, 0).is_err());
    }
}
