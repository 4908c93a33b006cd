//! Survey response loading, gold distributions by relative frequency, and
//! deterministic 60/20/20 question splits.
//!
//! Questions come from a JSON array; respondents from JSON Lines
//! (`{"question_id", "choice_index", "demographics": {..}}`) or CSV with
//! columns `question_id,choice_index,<attribute>...` (empty cell = attribute
//! not reported).

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::opinion::{GroupKey, OpinionDistribution, OpinionError, SurveyQuestion};
use crate::seed::SeedMixer;

pub const DEFAULT_MIN_GROUP_COUNT: u64 = 20;
pub const GOLD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("schema error at {location}: {message}")]
    Schema { location: String, message: String },
    #[error("dataset has no respondent records")]
    EmptyDataset,
    #[error("dataset `{dataset}` has {count} questions; at least 5 are needed to split")]
    TooFewQuestions { dataset: String, count: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Opinion(#[from] OpinionError),
}

fn schema(location: impl Into<String>, message: impl Into<String>) -> IngestError {
    IngestError::Schema {
        location: location.into(),
        message: message.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RespondentRecord {
    pub question_id: String,
    pub choice_index: i64,
    #[serde(default)]
    pub demographics: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldEntry {
    pub distribution: OpinionDistribution,
    pub respondents: u64,
}

/// Gold distributions keyed by question and group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GoldTable {
    entries: BTreeMap<String, BTreeMap<GroupKey, GoldEntry>>,
}

impl GoldTable {
    pub fn insert(&mut self, question_id: &str, group: GroupKey, entry: GoldEntry) {
        self.entries
            .entry(question_id.to_string())
            .or_default()
            .insert(group, entry);
    }

    pub fn get(&self, question_id: &str, group: &GroupKey) -> Option<&GoldEntry> {
        self.entries.get(question_id)?.get(group)
    }

    pub fn distribution(&self, question_id: &str, group: &GroupKey) -> Option<&OpinionDistribution> {
        self.get(question_id, group).map(|e| &e.distribution)
    }

    pub fn groups(&self, question_id: &str) -> impl Iterator<Item = (&GroupKey, &GoldEntry)> {
        self.entries.get(question_id).into_iter().flat_map(|m| m.iter())
    }

    /// Groups an elicited distribution for this question is scored against:
    /// every demographic group when any exist, else the all-respondents entry.
    pub fn target_groups(&self, question_id: &str) -> Vec<GroupKey> {
        let groups: Vec<GroupKey> = self
            .groups(question_id)
            .map(|(g, _)| g.clone())
            .filter(|g| !g.is_all())
            .collect();
        if groups.is_empty() && self.get(question_id, &GroupKey::all()).is_some() {
            vec![GroupKey::all()]
        } else {
            groups
        }
    }

    pub fn question_ids(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &GroupKey, &GoldEntry)> {
        self.entries
            .iter()
            .flat_map(|(q, m)| m.iter().map(move |(g, e)| (q, g, e)))
    }
}

/// On-disk form of a gold table together with its questions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldFile {
    pub schema: u32,
    pub questions: Vec<SurveyQuestion>,
    pub entries: Vec<GoldRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldRow {
    pub question_id: String,
    pub group: GroupKey,
    pub distribution: OpinionDistribution,
    pub respondents: u64,
}

impl GoldFile {
    pub fn new(questions: &[SurveyQuestion], gold: &GoldTable) -> Self {
        GoldFile {
            schema: GOLD_SCHEMA_VERSION,
            questions: questions.to_vec(),
            entries: gold
                .iter()
                .map(|(q, g, e)| GoldRow {
                    question_id: q.clone(),
                    group: g.clone(),
                    distribution: e.distribution.clone(),
                    respondents: e.respondents,
                })
                .collect(),
        }
    }

    pub fn into_parts(self) -> (Vec<SurveyQuestion>, GoldTable) {
        let mut gold = GoldTable::default();
        for row in self.entries {
            gold.insert(
                &row.question_id,
                row.group,
                GoldEntry {
                    distribution: row.distribution,
                    respondents: row.respondents,
                },
            );
        }
        (self.questions, gold)
    }

    pub fn read(path: &Path) -> Result<Self, IngestError> {
        let file = File::open(path).map_err(io_err(path))?;
        let parsed: GoldFile = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| schema(path.display().to_string(), e.to_string()))?;
        if parsed.schema != GOLD_SCHEMA_VERSION {
            return Err(schema(
                path.display().to_string(),
                format!("unsupported gold schema {}", parsed.schema),
            ));
        }
        Ok(parsed)
    }

    pub fn write(&self, path: &Path) -> Result<(), IngestError> {
        let text = serde_json::to_string_pretty(self).expect("gold file serializes");
        std::fs::write(path, text).map_err(io_err(path))
    }
}

pub fn read_questions(path: &Path) -> Result<Vec<SurveyQuestion>, IngestError> {
    let file = File::open(path).map_err(io_err(path))?;
    let questions: Vec<SurveyQuestion> = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| schema(path.display().to_string(), e.to_string()))?;
    validate_questions(&questions)?;
    Ok(questions)
}

pub fn validate_questions(questions: &[SurveyQuestion]) -> Result<(), IngestError> {
    let mut seen = BTreeSet::new();
    for (i, q) in questions.iter().enumerate() {
        q.validate()
            .map_err(|e| schema(format!("question {}", i + 1), e.to_string()))?;
        if !seen.insert(q.id.as_str()) {
            return Err(schema(format!("question {}", i + 1), format!("duplicate id `{}`", q.id)));
        }
    }
    Ok(())
}

/// Reads respondents as JSON Lines, or CSV when the extension is `.csv`.
pub fn read_respondents(path: &Path) -> Result<Vec<RespondentRecord>, IngestError> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        read_respondents_csv(path)
    } else {
        read_respondents_jsonl(path)
    }
}

fn read_respondents_jsonl(path: &Path) -> Result<Vec<RespondentRecord>, IngestError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RespondentRecord = serde_json::from_str(&line)
            .map_err(|e| schema(format!("{} line {}", path.display(), i + 1), e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

fn read_respondents_csv(path: &Path) -> Result<Vec<RespondentRecord>, IngestError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| schema(path.display().to_string(), e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| schema(path.display().to_string(), e.to_string()))?
        .clone();
    if headers.get(0) != Some("question_id") || headers.get(1) != Some("choice_index") {
        return Err(schema(
            path.display().to_string(),
            "CSV must start with columns question_id,choice_index",
        ));
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let location = format!("{} row {}", path.display(), i + 2);
        let row = row.map_err(|e| schema(location.clone(), e.to_string()))?;
        let choice_index = row[1]
            .trim()
            .parse::<i64>()
            .map_err(|_| schema(location.clone(), format!("choice_index `{}` is not an integer", &row[1])))?;
        let demographics = headers
            .iter()
            .zip(row.iter())
            .skip(2)
            .filter(|(_, v)| !v.trim().is_empty())
            .map(|(h, v)| (h.to_string(), v.trim().to_string()))
            .collect();
        out.push(RespondentRecord {
            question_id: row[0].to_string(),
            choice_index,
            demographics,
        });
    }
    Ok(out)
}

/// Counts answers per (question, group) and keeps groups with at least
/// `min_group_count` respondents. The all-respondents entry is always kept.
pub fn build_gold(
    questions: &[SurveyQuestion],
    records: &[RespondentRecord],
    min_group_count: u64,
) -> Result<GoldTable, IngestError> {
    if records.is_empty() {
        return Err(IngestError::EmptyDataset);
    }
    let k_of: BTreeMap<&str, usize> = questions.iter().map(|q| (q.id.as_str(), q.k())).collect();
    let mut counts: BTreeMap<(&str, GroupKey), Vec<u64>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let location = || format!("respondent record {}", i + 1);
        let &k = k_of
            .get(r.question_id.as_str())
            .ok_or_else(|| schema(location(), format!("unknown question_id `{}`", r.question_id)))?;
        if r.choice_index < 1 || r.choice_index as usize > k {
            return Err(schema(
                location(),
                format!("choice_index {} outside [1, {k}]", r.choice_index),
            ));
        }
        let slot = r.choice_index as usize - 1;
        let mut bump = |group: GroupKey| {
            counts
                .entry((r.question_id.as_str(), group))
                .or_insert_with(|| vec![0; k])[slot] += 1;
        };
        bump(GroupKey::all());
        for (attribute, value) in &r.demographics {
            let group = GroupKey::new(attribute.as_str(), value.as_str())
                .map_err(|e| schema(location(), e.to_string()))?;
            bump(group);
        }
    }

    let mut gold = GoldTable::default();
    for ((question_id, group), c) in counts {
        let n: u64 = c.iter().sum();
        if !group.is_all() && n < min_group_count {
            log::warn!("omitting {question_id} / {group}: {n} respondents < {min_group_count}");
            continue;
        }
        gold.insert(
            question_id,
            group,
            GoldEntry {
                distribution: OpinionDistribution::from_counts(&c)?,
                respondents: n,
            },
        );
    }
    for q in questions {
        if gold.get(&q.id, &GroupKey::all()).is_none() {
            log::warn!("question {} has no respondents", q.id);
        }
    }
    Ok(gold)
}

pub fn load_dataset(
    questions_path: &Path,
    respondents_path: &Path,
    min_group_count: u64,
) -> Result<(Vec<SurveyQuestion>, GoldTable), IngestError> {
    let questions = read_questions(questions_path)?;
    let records = read_respondents(respondents_path)?;
    let gold = build_gold(&questions, &records, min_group_count)?;
    Ok((questions, gold))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];
    pub const PROPORTIONS: [f64; 3] = [0.6, 0.2, 0.2];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub assignments: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn get(&self, question_id: &str) -> Option<Split> {
        self.assignments.get(question_id).copied()
    }

    pub fn questions_in(&self, split: Split) -> impl Iterator<Item = &String> {
        self.assignments
            .iter()
            .filter(move |(_, s)| **s == split)
            .map(|(q, _)| q)
    }

    pub fn read(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| schema(path.display().to_string(), e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<(), IngestError> {
        let text = serde_json::to_string_pretty(self).expect("splits serialize");
        std::fs::write(path, text).map_err(io_err(path))
    }
}

/// Largest-remainder apportionment of `n` items to train/dev/test; ties on
/// the remainder go to the earlier split.
pub fn split_counts(n: usize) -> [usize; 3] {
    let quotas = Split::PROPORTIONS.map(|p| p * n as f64);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    // stable sort keeps index order among equal remainders
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Minimum members for a category to form its own stratum.
pub const MIN_STRATUM: usize = 5;

/// Deterministic stratified 60/20/20 split by question.
///
/// Within each dataset, categories with at least [`MIN_STRATUM`] questions are
/// strata of their own (sorted by name); smaller categories are pooled into
/// one trailing stratum. Each stratum is shuffled with a seed derived from
/// `(seed, dataset, category)`. Stratum counts are the differences of
/// largest-remainder counts of the running question total, so every dataset
/// gets exactly the largest-remainder split of its size.
pub fn make_splits(questions: &[SurveyQuestion], seed: u64) -> Result<SplitAssignment, IngestError> {
    let mut by_dataset: BTreeMap<&str, BTreeMap<&str, Vec<&str>>> = BTreeMap::new();
    for q in questions {
        by_dataset
            .entry(q.dataset.as_str())
            .or_default()
            .entry(q.category.as_str())
            .or_default()
            .push(q.id.as_str());
    }
    let mut assignments = BTreeMap::new();
    for (dataset, categories) in by_dataset {
        let total: usize = categories.values().map(Vec::len).sum();
        if total < MIN_STRATUM {
            return Err(IngestError::TooFewQuestions {
                dataset: dataset.to_string(),
                count: total,
            });
        }
        let mut strata: Vec<(String, Vec<&str>)> = Vec::new();
        let mut pooled: Vec<&str> = Vec::new();
        for (category, ids) in categories {
            if ids.len() >= MIN_STRATUM {
                strata.push((category.to_string(), ids));
            } else {
                pooled.extend(ids);
            }
        }
        if !pooled.is_empty() {
            strata.push(("\u{0}pooled".to_string(), pooled));
        }

        let mut running = 0usize;
        let mut before = [0usize; 3];
        for (category, mut ids) in strata {
            ids.sort_unstable();
            let mut rng = SeedMixer::new(seed).str(dataset).str(&category).rng();
            ids.shuffle(&mut rng);
            running += ids.len();
            let after = split_counts(running);
            let mut cursor = ids.into_iter();
            for (s, split) in Split::ALL.into_iter().enumerate() {
                for id in cursor.by_ref().take(after[s] - before[s]) {
                    assignments.insert(id.to_string(), split);
                }
            }
            before = after;
        }
    }
    Ok(SplitAssignment { seed, assignments })
}
