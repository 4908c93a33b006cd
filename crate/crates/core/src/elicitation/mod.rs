//! Prompting models for opinion distributions.
//!
//! Four protocols are supported: verbalized (the model writes the
//! distribution, 3 samples averaged), self-random (5 sampled single choices),
//! paraphrase (one choice per each of 5 prompt wordings) and log-probability
//! (softmax over the scores of the answer indices).

mod parse;
mod templates;

pub use parse::{parse_choice, parse_verbalized, Discard, ParsedVerbalized, PERCENT_WINDOW};
pub use templates::{format_answer_choices, PromptTemplate, TemplateMethod, TemplateSet};

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{map_slice, Execution};
use crate::ingest::GoldTable;
use crate::opinion::{
    DistributionKey, ElicitationMethod, GroupKey, NegativePolicy, OpinionDistribution, OpinionError, PromptKind,
    Setting, SurveyQuestion,
};
use crate::providers::{CompletionRequest, Provider, ProviderError, RequestContext, ResponseFormat};

pub const VERBALIZED_SAMPLES: u32 = 3;
pub const SELF_RANDOM_SAMPLES: u32 = 5;
pub const PARAPHRASES: u8 = 5;
/// Temperature for self-random and paraphrase sampling.
pub const SAMPLING_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Error)]
pub enum ElicitError {
    #[error("all {attempted} sample(s) discarded for {question_id} / {group}")]
    AllSamplesDiscarded {
        question_id: String,
        group: GroupKey,
        attempted: usize,
    },
    #[error("provider does not support log-probabilities")]
    LogprobsUnsupported,
    #[error(transparent)]
    Provider(ProviderError),
    #[error("template error: {0}")]
    Template(String),
    #[error(transparent)]
    Opinion(#[from] OpinionError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Record { path: String, line: usize, message: String },
}

impl From<ProviderError> for ElicitError {
    fn from(e: ProviderError) -> Self {
        match e {
            ProviderError::LogprobsUnsupported => ElicitError::LogprobsUnsupported,
            other => ElicitError::Provider(other),
        }
    }
}

impl ElicitError {
    /// Errors that will recur for every question, so a batch should stop.
    pub fn is_fatal(&self) -> bool {
        !matches!(
            self,
            ElicitError::AllSamplesDiscarded { .. }
                | ElicitError::Opinion(_)
                | ElicitError::Provider(ProviderError::Provider { .. })
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElicitationRecord {
    pub key: DistributionKey,
    pub distribution: OpinionDistribution,
    pub n_samples_used: usize,
    pub n_discarded: usize,
    pub raw_outputs: Vec<String>,
}

impl ElicitationRecord {
    pub fn setting(&self) -> &Setting {
        self.key.setting.as_ref().expect("elicited keys carry a setting")
    }
}

/// Per-call knobs; the defaults follow the standard protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElicitOptions {
    /// `None` uses the provider's configured temperature.
    pub verbalized_temperature: Option<f64>,
    pub sampling_temperature: f64,
}

impl Default for ElicitOptions {
    fn default() -> Self {
        ElicitOptions {
            verbalized_temperature: None,
            sampling_temperature: SAMPLING_TEMPERATURE,
        }
    }
}

struct Call<'a> {
    provider: &'a dyn Provider,
    question: &'a SurveyQuestion,
    group: &'a GroupKey,
}

impl Call<'_> {
    fn request(&self, prompt: String, temperature: f64, sample_index: u32, format: ResponseFormat) -> CompletionRequest {
        CompletionRequest {
            prompt,
            temperature,
            sample_index,
            logprobs_for: None,
            context: Some(RequestContext {
                question_id: self.question.id.clone(),
                group: self.group.clone(),
                k: self.question.k(),
                format,
            }),
        }
    }

    fn key(&self, method: ElicitationMethod, kind: PromptKind) -> DistributionKey {
        DistributionKey::elicited(
            self.question.id.clone(),
            self.group.clone(),
            Setting {
                model_id: self.provider.model_id().to_string(),
                method,
                prompt_kind: kind,
            },
        )
    }

    fn discarded_all(&self, attempted: usize) -> ElicitError {
        ElicitError::AllSamplesDiscarded {
            question_id: self.question.id.clone(),
            group: self.group.clone(),
            attempted,
        }
    }

    /// Runs single-choice prompts and counts the parsable answers.
    fn choices(
        &self,
        prompts: Vec<(String, u32)>,
        temperature: f64,
        method: ElicitationMethod,
        kind: PromptKind,
    ) -> Result<ElicitationRecord, ElicitError> {
        let k = self.question.k();
        let attempted = prompts.len();
        let mut picks = Vec::new();
        let mut raw_outputs = Vec::new();
        for (prompt, index) in prompts {
            let response = self.provider.complete(&self.request(prompt, temperature, index, ResponseFormat::Choice))?;
            if let Ok(c) = parse_choice(&response.text, k) {
                picks.push(c as i64);
            }
            raw_outputs.push(response.text);
        }
        if picks.is_empty() {
            return Err(self.discarded_all(attempted));
        }
        Ok(ElicitationRecord {
            key: self.key(method, kind),
            distribution: OpinionDistribution::from_samples(&picks, k)?,
            n_samples_used: picks.len(),
            n_discarded: attempted - picks.len(),
            raw_outputs,
        })
    }
}

pub fn elicit_verbalized(
    provider: &dyn Provider,
    templates: &TemplateSet,
    question: &SurveyQuestion,
    group: &GroupKey,
    kind: PromptKind,
    options: &ElicitOptions,
) -> Result<ElicitationRecord, ElicitError> {
    let call = Call { provider, question, group };
    let prompt = templates.render(TemplateMethod::Verbalized, question, group)?;
    let temperature = options.verbalized_temperature.unwrap_or_else(|| provider.temperature());
    let mut parsed = Vec::new();
    let mut raw_outputs = Vec::new();
    for i in 0..VERBALIZED_SAMPLES {
        let response = provider.complete(&call.request(prompt.clone(), temperature, i, ResponseFormat::Distribution))?;
        match parse_verbalized(&response.text, question.k()) {
            Ok(p) => parsed.push(p.distribution),
            Err(reason) => log::debug!("discarding verbalized output for {}: {reason}", question.id),
        }
        raw_outputs.push(response.text);
    }
    if parsed.is_empty() {
        return Err(call.discarded_all(VERBALIZED_SAMPLES as usize));
    }
    Ok(ElicitationRecord {
        key: call.key(ElicitationMethod::Verbalized, kind),
        distribution: OpinionDistribution::average(&parsed)?,
        n_samples_used: parsed.len(),
        n_discarded: VERBALIZED_SAMPLES as usize - parsed.len(),
        raw_outputs,
    })
}

pub fn elicit_self_random(
    provider: &dyn Provider,
    templates: &TemplateSet,
    question: &SurveyQuestion,
    group: &GroupKey,
    kind: PromptKind,
    options: &ElicitOptions,
) -> Result<ElicitationRecord, ElicitError> {
    let call = Call { provider, question, group };
    let prompt = templates.render(TemplateMethod::SelfRandom, question, group)?;
    let prompts = (0..SELF_RANDOM_SAMPLES).map(|i| (prompt.clone(), i)).collect();
    call.choices(prompts, options.sampling_temperature, ElicitationMethod::SelfRandom, kind)
}

pub fn elicit_paraphrase(
    provider: &dyn Provider,
    templates: &TemplateSet,
    question: &SurveyQuestion,
    group: &GroupKey,
    kind: PromptKind,
    options: &ElicitOptions,
) -> Result<ElicitationRecord, ElicitError> {
    let call = Call { provider, question, group };
    let prompts = (1..=PARAPHRASES)
        .map(|j| Ok((templates.render(TemplateMethod::Paraphrase(j), question, group)?, u32::from(j - 1))))
        .collect::<Result<Vec<_>, ElicitError>>()?;
    call.choices(prompts, options.sampling_temperature, ElicitationMethod::Paraphrase, kind)
}

/// Softmax over log-probabilities; candidates with no score get zero mass.
pub fn softmax_logprobs(logprobs: &[Option<f64>]) -> Option<Vec<f64>> {
    let top = logprobs.iter().flatten().cloned().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return None;
    }
    let weights: Vec<f64> = logprobs
        .iter()
        .map(|lp| lp.filter(|v| v.is_finite()).map_or(0.0, |v| (v - top).exp()))
        .collect();
    let sum: f64 = weights.iter().sum();
    Some(weights.into_iter().map(|w| w / sum).collect())
}

pub fn elicit_logprob(
    provider: &dyn Provider,
    templates: &TemplateSet,
    question: &SurveyQuestion,
    group: &GroupKey,
    kind: PromptKind,
    _options: &ElicitOptions,
) -> Result<ElicitationRecord, ElicitError> {
    if !provider.supports_logprobs() {
        return Err(ElicitError::LogprobsUnsupported);
    }
    let call = Call { provider, question, group };
    let k = question.k();
    let candidates: Vec<String> = (1..=k).map(|i| i.to_string()).collect();
    let mut request = call.request(
        templates.render(TemplateMethod::Logprob, question, group)?,
        provider.temperature(),
        0,
        ResponseFormat::Choice,
    );
    request.logprobs_for = Some(candidates.clone());
    let response = provider.complete(&request)?;
    let table = response.logprobs.unwrap_or_default();
    let raw = serde_json::to_string(&table).expect("logprob map serializes");
    let scores: Vec<Option<f64>> = candidates.iter().map(|c| table.get(c).copied()).collect();
    let probs = softmax_logprobs(&scores).ok_or_else(|| call.discarded_all(1))?;
    Ok(ElicitationRecord {
        key: call.key(ElicitationMethod::Logprob, kind),
        distribution: OpinionDistribution::renormalize(&probs, NegativePolicy::Reject)?,
        n_samples_used: 1,
        n_discarded: 0,
        raw_outputs: vec![raw],
    })
}

pub fn elicit(
    method: ElicitationMethod,
    provider: &dyn Provider,
    templates: &TemplateSet,
    question: &SurveyQuestion,
    group: &GroupKey,
    kind: PromptKind,
    options: &ElicitOptions,
) -> Result<ElicitationRecord, ElicitError> {
    let f = match method {
        ElicitationMethod::Verbalized => elicit_verbalized,
        ElicitationMethod::SelfRandom => elicit_self_random,
        ElicitationMethod::Paraphrase => elicit_paraphrase,
        ElicitationMethod::Logprob => elicit_logprob,
    };
    f(provider, templates, question, group, kind, options)
}

/// Groups a prompt kind elicits for: the all-respondents group once for base
/// prompts, every demographic group with gold data for SD prompts.
pub fn groups_to_elicit(gold: &GoldTable, question_id: &str, kind: PromptKind) -> Vec<GroupKey> {
    match kind {
        PromptKind::Base => gold
            .get(question_id, &GroupKey::all())
            .map(|_| vec![GroupKey::all()])
            .unwrap_or_default(),
        PromptKind::Sd => gold.target_groups(question_id),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElicitFailure {
    pub question_id: String,
    pub group: GroupKey,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ElicitationRun {
    pub records: Vec<ElicitationRecord>,
    pub failures: Vec<ElicitFailure>,
}

/// Elicits every (question, group) cell. Records come back in question then
/// group order regardless of `exec`. Stops at the first fatal error.
#[allow(clippy::too_many_arguments)]
pub fn elicit_all(
    method: ElicitationMethod,
    provider: &dyn Provider,
    templates: &TemplateSet,
    questions: &[SurveyQuestion],
    gold: &GoldTable,
    kind: PromptKind,
    options: &ElicitOptions,
    exec: Execution,
) -> Result<ElicitationRun, ElicitError> {
    let cells: Vec<(&SurveyQuestion, GroupKey)> = questions
        .iter()
        .flat_map(|q| groups_to_elicit(gold, &q.id, kind).into_iter().map(move |g| (q, g)))
        .collect();
    let results = map_slice(exec, &cells, |(q, g)| elicit(method, provider, templates, q, g, kind, options));
    let mut run = ElicitationRun::default();
    for ((q, g), result) in cells.iter().zip(results) {
        match result {
            Ok(record) => run.records.push(record),
            Err(e) if e.is_fatal() => return Err(e),
            Err(e) => {
                log::warn!("{} / {g}: {e}", q.id);
                run.failures.push(ElicitFailure {
                    question_id: q.id.clone(),
                    group: g.clone(),
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(run)
}

pub fn write_records(path: &Path, records: &[ElicitationRecord]) -> Result<(), ElicitError> {
    let io = |source| ElicitError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for record in records {
        serde_json::to_writer(&mut out, record).expect("record serializes");
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_records(path: &Path) -> Result<Vec<ElicitationRecord>, ElicitError> {
    let io = |source| ElicitError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut records = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ElicitationRecord = serde_json::from_str(&line).map_err(|e| ElicitError::Record {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if !record.key.is_consistent() || record.n_samples_used == 0 {
            return Err(ElicitError::Record {
                path: path.display().to_string(),
                line: i + 1,
                message: "record has no setting or no samples".into(),
            });
        }
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::GoldEntry;
    use crate::providers::{CompletionResponse, MockBackend, MockDistortion, ProviderConfig};
    use crate::providers::{Client, FakeClock};
    use std::collections::BTreeMap;
    use std::sync::{Arc, Mutex};

    /// Replays canned texts in order.
    struct Canned {
        texts: Mutex<Vec<String>>,
        logprobs: Option<BTreeMap<String, f64>>,
    }

    impl Canned {
        fn new(texts: &[&str]) -> Self {
            Canned {
                texts: Mutex::new(texts.iter().rev().map(|s| s.to_string()).collect()),
                logprobs: None,
            }
        }
    }

    impl Provider for Canned {
        fn model_id(&self) -> &str {
            "canned"
        }
        fn supports_logprobs(&self) -> bool {
            self.logprobs.is_some()
        }
        fn temperature(&self) -> f64 {
            0.7
        }
        fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
            let text = if request.logprobs_for.is_some() {
                String::new()
            } else {
                self.texts.lock().unwrap().pop().unwrap_or_default()
            };
            Ok(CompletionResponse {
                text,
                logprobs: self.logprobs.clone(),
                model_id: "canned".into(),
                from_cache: false,
                attempts: 1,
            })
        }
    }

    fn question(k: usize) -> SurveyQuestion {
        SurveyQuestion {
            id: "q1".into(),
            dataset: "d".into(),
            category: String::new(),
            text: "Is it good?".into(),
            choices: (1..=k).map(|i| format!("option {i}")).collect(),
        }
    }

    fn run(method: ElicitationMethod, p: &dyn Provider, k: usize) -> Result<ElicitationRecord, ElicitError> {
        elicit(
            method,
            p,
            &TemplateSet::builtin(),
            &question(k),
            &GroupKey::all(),
            PromptKind::Base,
            &ElicitOptions::default(),
        )
    }

    #[test]
    fn verbalized_averages_survivors() {
        let p = Canned::new(&["[0.6, 0.4]", "no idea", "[20, 80]"]);
        let r = run(ElicitationMethod::Verbalized, &p, 2).unwrap();
        assert_eq!(r.n_samples_used, 2);
        assert_eq!(r.n_discarded, 1);
        assert!((r.distribution.probs()[0] - 0.4).abs() < 1e-12);
        assert_eq!(r.raw_outputs.len(), 3);
        let p = Canned::new(&["a", "b", "c"]);
        assert!(matches!(
            run(ElicitationMethod::Verbalized, &p, 2),
            Err(ElicitError::AllSamplesDiscarded { attempted: 3, .. })
        ));
    }

    #[test]
    fn self_random_counts() {
        let p = Canned::new(&["4", "4", "3", "4", "1"]);
        let r = run(ElicitationMethod::SelfRandom, &p, 4).unwrap();
        assert_eq!(r.distribution.probs(), &[0.2, 0.0, 0.2, 0.6]);
        let p = Canned::new(&["2", "2", "2", "2", "2"]);
        assert_eq!(run(ElicitationMethod::SelfRandom, &p, 3).unwrap().distribution.probs(), &[0.0, 1.0, 0.0]);
        let p = Canned::new(&["1", "x", "1", "7", "2"]);
        let r = run(ElicitationMethod::SelfRandom, &p, 2).unwrap();
        assert!((r.distribution.probs()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.n_discarded, 2);
    }

    #[test]
    fn paraphrase_uses_five_prompts() {
        let p = Canned::new(&["1", "2", "2", "2", "1"]);
        let r = run(ElicitationMethod::Paraphrase, &p, 2).unwrap();
        assert_eq!(r.distribution.probs(), &[0.4, 0.6]);
        assert_eq!(r.key.setting.as_ref().unwrap().method, ElicitationMethod::Paraphrase);
    }

    #[test]
    fn logprob_softmax() {
        let mut p = Canned::new(&[]);
        p.logprobs = Some([("1", -1.3), ("2", -1.3), ("3", -1.3), ("4", -1.3)].map(|(k, v)| (k.to_string(), v)).into());
        assert_eq!(run(ElicitationMethod::Logprob, &p, 4).unwrap().distribution.probs(), &[0.25; 4]);
        p.logprobs = Some([("1", 0.6f64.ln()), ("2", 0.3f64.ln()), ("3", 0.1f64.ln())].map(|(k, v)| (k.to_string(), v)).into());
        let r = run(ElicitationMethod::Logprob, &p, 3).unwrap();
        for (a, b) in r.distribution.probs().iter().zip([0.6, 0.3, 0.1]) {
            assert!((a - b).abs() < 1e-12);
        }
        let plain = Canned::new(&[]);
        assert!(matches!(run(ElicitationMethod::Logprob, &plain, 3), Err(ElicitError::LogprobsUnsupported)));
    }

    fn mock_world(distortion: MockDistortion) -> (Client, GoldTable, Vec<SurveyQuestion>) {
        let mut gold = GoldTable::default();
        let female = GroupKey::new("sex", "female").unwrap();
        for (g, p) in [(GroupKey::all(), vec![0.5, 0.25, 0.25]), (female, vec![0.2, 0.3, 0.5])] {
            gold.insert(
                "q1",
                g,
                GoldEntry {
                    distribution: OpinionDistribution::new(p).unwrap(),
                    respondents: 50,
                },
            );
        }
        let gold_arc = Arc::new(gold.clone());
        let config = ProviderConfig::mock("mock-id", distortion.clone());
        let backend = Box::new(MockBackend::new(gold_arc, distortion).with_model_id("mock-id"));
        let client = Client::new(config, backend, None, Arc::new(FakeClock::default())).unwrap();
        (client, gold, vec![question(3)])
    }

    #[test]
    fn identity_mock_round_trip() {
        let (client, gold, qs) = mock_world(MockDistortion::identity(0));
        let r = run(ElicitationMethod::Verbalized, &client, 3).unwrap();
        assert_eq!(r.distribution.probs(), &[0.5, 0.25, 0.25]);
        assert_eq!(r.n_samples_used, 3);
        let opts = ElicitOptions::default();
        let t = TemplateSet::builtin();
        let base = elicit_all(ElicitationMethod::Logprob, &client, &t, &qs, &gold, PromptKind::Base, &opts, Execution::Parallel).unwrap();
        assert_eq!(base.records.len(), 1);
        assert!(base.records[0].key.group.is_all());
        let sd = elicit_all(ElicitationMethod::Logprob, &client, &t, &qs, &gold, PromptKind::Sd, &opts, Execution::Sequential).unwrap();
        assert_eq!(sd.records.len(), 1);
        assert_eq!(sd.records[0].key.group.value, "female");
        for (a, b) in sd.records[0].distribution.probs().iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn self_random_multiples_of_used_samples() {
        let (client, _, _) = mock_world(MockDistortion::sharpen(1.5, 0.1, 3));
        let r = run(ElicitationMethod::SelfRandom, &client, 3).unwrap();
        for p in r.distribution.probs() {
            let scaled = p * r.n_samples_used as f64;
            assert!((scaled - scaled.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn garbled_mock_is_discarded_not_fatal() {
        let (client, gold, qs) = mock_world(MockDistortion {
            garble_rate: 1.0,
            ..MockDistortion::identity(0)
        });
        let run = elicit_all(
            ElicitationMethod::Verbalized,
            &client,
            &TemplateSet::builtin(),
            &qs,
            &gold,
            PromptKind::Base,
            &ElicitOptions::default(),
            Execution::Sequential,
        )
        .unwrap();
        assert!(run.records.is_empty());
        assert_eq!(run.failures.len(), 1);
    }

    #[test]
    fn jsonl_round_trip() {
        let (client, _, _) = mock_world(MockDistortion::sharpen(2.0, 0.05, 1));
        let r = run(ElicitationMethod::Verbalized, &client, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        write_records(&path, &[r.clone(), r.clone()]).unwrap();
        assert_eq!(read_records(&path).unwrap(), vec![r.clone(), r]);
        std::fs::write(&path, "{\"bad\": 1}\n").unwrap();
        assert!(matches!(read_records(&path), Err(ElicitError::Record { line: 1, .. })));
    }
}
