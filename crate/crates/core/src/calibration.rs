//! Supervised calibration of elicited distributions.
//!
//! Every elicited distribution is split into per-choice scalars and paired
//! with the gold value for the same choice. One scalar regressor per setting
//! (dataset, model, method, prompt kind) is fitted on train questions, picked
//! from a fixed candidate grid by dev MSE, and applied entry-wise followed by
//! clip-and-renormalize.
//!
//! Two research options change this and are off by default: extra regressor
//! inputs ([`FeatureSet::ProbabilityPosition`]) and one calibrator per
//! demographic group ([`CalibrationOptions::per_group`]).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elicitation::ElicitationRecord;
use crate::exec::{map_range, map_slice, Execution};
use crate::ingest::{GoldTable, Split, SplitAssignment};
use crate::metrics::{opinion_alignment, MetricError};
use crate::opinion::{
    ElicitationMethod, GroupKey, NegativePolicy, OpinionDistribution, PromptKind, Setting,
};
use crate::regressors::{
    fit_rows, fit_with, mse, mse_rows, FittedRegressor, ForestParams, RegressorError, RegressorSpec,
};
use crate::seed::SeedMixer;

/// Calibrated mass at or below this falls back to uniform.
pub const DEGENERATE_MASS: f64 = 1e-12;
pub const RIDGE_ALPHAS: [f64; 4] = [0.01, 0.1, 1.0, 10.0];
pub const LASSO_ALPHAS: [f64; 4] = [0.0001, 0.001, 0.01, 0.1];
pub const FOREST_TREES: usize = 100;
pub const FOREST_DEPTHS: [Option<usize>; 3] = [Some(4), Some(8), None];
pub const FOREST_MIN_LEAVES: [usize; 3] = [1, 2, 5];
pub const DEFAULT_SEEDS: usize = 10;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("no gold distribution for {question_id} / {group}")]
    MissingGold { question_id: String, group: GroupKey },
    #[error("question {0} has no split assignment")]
    UnassignedQuestion(String),
    #[error("selection produced no pairs")]
    EmptySelection,
    #[error("need >= 2 train and >= 1 dev pairs, got {train} and {dev}")]
    TooFewPairs { train: usize, dev: usize },
    #[error("records span more than one setting: {0} and {1}")]
    MixedSettings(String, String),
    #[error("no candidate regressor could be fitted: {0}")]
    NoCandidateFit(String),
    #[error("cross-dataset calibration needs >= 2 source datasets, got {0}")]
    TooFewDatasets(usize),
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),
    #[error("invalid supervision size: {0}")]
    InvalidSize(String),
    #[error(transparent)]
    Regressor(#[from] RegressorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn io_error(path: &Path, e: impl fmt::Display) -> CalibrationError {
    CalibrationError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Regressor inputs for one choice entry.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSet {
    /// The elicited probability alone.
    #[default]
    Probability,
    /// Probability, relative choice position `i / (k - 1)` and `k`.
    ProbabilityPosition,
}

impl FeatureSet {
    pub fn is_default(&self) -> bool {
        *self == FeatureSet::Probability
    }

    pub fn row(self, p: f64, choice: usize, k: usize) -> Vec<f64> {
        match self {
            FeatureSet::Probability => vec![p],
            FeatureSet::ProbabilityPosition => {
                vec![p, choice as f64 / (k.max(2) - 1) as f64, k as f64]
            }
        }
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureSet::Probability => "probability",
            FeatureSet::ProbabilityPosition => "probability-position",
        })
    }
}

impl std::str::FromStr for FeatureSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "probability" => Ok(FeatureSet::Probability),
            "probability-position" => Ok(FeatureSet::ProbabilityPosition),
            other => Err(format!("unknown feature set `{other}` (probability, probability-position)")),
        }
    }
}

/// Where one scalar pair came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRef {
    pub question_id: String,
    pub group: GroupKey,
    pub choice: usize,
    /// Number of answer options of the question.
    #[serde(default)]
    pub k: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingPairs {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub refs: Vec<PairRef>,
}

impl TrainingPairs {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn questions(&self) -> BTreeSet<&str> {
        self.refs.iter().map(|r| r.question_id.as_str()).collect()
    }

    /// Pairs whose question is in `keep`.
    pub fn restrict(&self, keep: &BTreeSet<&str>) -> TrainingPairs {
        self.filter(|r| keep.contains(r.question_id.as_str()))
    }

    pub fn for_group(&self, group: &GroupKey) -> TrainingPairs {
        self.filter(|r| r.group == *group)
    }

    pub fn groups(&self) -> BTreeSet<&GroupKey> {
        self.refs.iter().map(|r| &r.group).collect()
    }

    /// Regressor input rows in pair order.
    pub fn rows(&self, features: FeatureSet) -> Vec<Vec<f64>> {
        self.xs
            .iter()
            .zip(&self.refs)
            .map(|(&x, r)| features.row(x, r.choice, r.k))
            .collect()
    }

    fn filter(&self, keep: impl Fn(&PairRef) -> bool) -> TrainingPairs {
        let mut out = TrainingPairs::default();
        for i in 0..self.len() {
            if keep(&self.refs[i]) {
                out.xs.push(self.xs[i]);
                out.ys.push(self.ys[i]);
                out.refs.push(self.refs[i].clone());
            }
        }
        out
    }

    pub fn extend(&mut self, other: TrainingPairs) {
        self.xs.extend(other.xs);
        self.ys.extend(other.ys);
        self.refs.extend(other.refs);
    }
}

/// Gold groups an elicited record is compared against. A base-prompt record
/// elicited for all respondents stands in for every demographic group.
pub fn target_groups(record: &ElicitationRecord, gold: &GoldTable) -> Vec<GroupKey> {
    let base_all = record.key.group.is_all()
        && record
            .key
            .setting
            .as_ref()
            .is_none_or(|s| s.prompt_kind == PromptKind::Base);
    if base_all {
        gold.target_groups(&record.key.question_id)
    } else {
        vec![record.key.group.clone()]
    }
}

fn check_one_setting(records: &[ElicitationRecord]) -> Result<(), CalibrationError> {
    let mut first: Option<&Setting> = None;
    for r in records {
        let s = r.setting();
        match first {
            None => first = Some(s),
            Some(f) if f != s => {
                return Err(CalibrationError::MixedSettings(setting_label(f), setting_label(s)));
            }
            _ => {}
        }
    }
    Ok(())
}

fn setting_label(s: &Setting) -> String {
    format!("{}/{}/{}", s.model_id, s.method, s.prompt_kind)
}

/// Flattens records from the chosen splits into `(elicited[i], gold[i])`
/// pairs, one per choice and target group.
pub fn build_pairs(
    records: &[ElicitationRecord],
    gold: &GoldTable,
    splits: &SplitAssignment,
    which: &[Split],
) -> Result<TrainingPairs, CalibrationError> {
    check_one_setting(records)?;
    let mut pairs = TrainingPairs::default();
    for record in records {
        let q = &record.key.question_id;
        let split = splits
            .get(q)
            .ok_or_else(|| CalibrationError::UnassignedQuestion(q.clone()))?;
        if !which.contains(&split) {
            continue;
        }
        for group in target_groups(record, gold) {
            let g = gold.distribution(q, &group).ok_or_else(|| CalibrationError::MissingGold {
                question_id: q.clone(),
                group: group.clone(),
            })?;
            if g.k() != record.distribution.k() {
                return Err(CalibrationError::MissingGold {
                    question_id: q.clone(),
                    group,
                });
            }
            for (i, (&x, &y)) in record.distribution.probs().iter().zip(g.probs()).enumerate() {
                pairs.xs.push(x);
                pairs.ys.push(y);
                pairs.refs.push(PairRef {
                    question_id: q.clone(),
                    group: group.clone(),
                    choice: i,
                    k: g.k(),
                });
            }
        }
    }
    if pairs.is_empty() {
        return Err(CalibrationError::EmptySelection);
    }
    Ok(pairs)
}

/// Candidate specs in tie-break order: OLS, ridge and lasso by increasing
/// alpha, then forests by depth (shallow first) and leaf size.
pub fn default_grid(forest_seed: u64) -> Vec<RegressorSpec> {
    let mut grid = vec![RegressorSpec::Ols];
    grid.extend(RIDGE_ALPHAS.iter().map(|&alpha| RegressorSpec::Ridge { alpha }));
    grid.extend(LASSO_ALPHAS.iter().map(|&alpha| RegressorSpec::Lasso { alpha }));
    for depth in FOREST_DEPTHS {
        for min_leaf in FOREST_MIN_LEAVES {
            grid.push(RegressorSpec::RandomForest(ForestParams {
                n_trees: FOREST_TREES,
                max_depth: depth,
                min_leaf,
                seed: forest_seed,
                bootstrap: true,
            }));
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOptions {
    pub grid: Vec<RegressorSpec>,
    pub exec: Execution,
    pub features: FeatureSet,
    /// Also fit one calibrator per demographic group. Research option; the
    /// pooled calibrator stays the fallback for groups too small to fit.
    pub per_group: bool,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            grid: default_grid(0),
            exec: Execution::default(),
            features: FeatureSet::default(),
            per_group: false,
        }
    }
}

impl CalibrationOptions {
    pub fn with_seed(seed: u64) -> Self {
        CalibrationOptions {
            grid: default_grid(seed),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub label: String,
    pub spec: RegressorSpec,
    #[serde(default)]
    pub dev_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub candidates: Vec<CandidateResult>,
    pub chosen: String,
    pub chosen_dev_mse: f64,
}

/// (dataset, model, method, prompt kind).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SettingId {
    pub dataset: String,
    pub model_id: String,
    pub method: ElicitationMethod,
    pub prompt_kind: PromptKind,
}

impl SettingId {
    pub fn new(dataset: impl Into<String>, setting: &Setting) -> Self {
        SettingId {
            dataset: dataset.into(),
            model_id: setting.model_id.clone(),
            method: setting.method,
            prompt_kind: setting.prompt_kind,
        }
    }

    /// Registry file name, `<dataset>__<model>__<method>__<kind>.json`.
    pub fn file_name(&self) -> String {
        let clean = |s: &str| -> String {
            s.chars()
                .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
                .collect()
        };
        format!(
            "{}__{}__{}__{}.json",
            clean(&self.dataset),
            clean(&self.model_id),
            self.method,
            self.prompt_kind
        )
    }
}

impl fmt::Display for SettingId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}/{}", self.dataset, self.model_id, self.method, self.prompt_kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub setting: SettingId,
    pub fitted: FittedRegressor,
    pub selection: SelectionReport,
    pub n_train_questions: usize,
    pub n_train_pairs: usize,
    #[serde(default)]
    pub out_of_domain: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub source_datasets: Vec<String>,
    #[serde(default, skip_serializing_if = "FeatureSet::is_default")]
    pub features: FeatureSet,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub group_models: Vec<GroupModel>,
}

/// A calibrator fitted on one demographic group's pairs only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupModel {
    pub group: GroupKey,
    pub fitted: FittedRegressor,
    pub chosen: String,
    pub chosen_dev_mse: f64,
    pub n_train_pairs: usize,
}

impl CalibrationModel {
    /// The group's own calibrator when one was fitted, else the pooled one.
    pub fn regressor_for(&self, group: &GroupKey) -> &FittedRegressor {
        self.group_models
            .iter()
            .find(|g| g.group == *group)
            .map_or(&self.fitted, |g| &g.fitted)
    }

    /// Regression MSE over `pairs`, each scored by its group's calibrator.
    pub fn pair_mse(&self, pairs: &TrainingPairs) -> Result<f64, CalibrationError> {
        if self.group_models.is_empty() && self.features.is_default() {
            return Ok(mse(&self.fitted, &pairs.xs, &pairs.ys)?);
        }
        if pairs.is_empty() {
            return Err(CalibrationError::EmptySelection);
        }
        let sum: f64 = (0..pairs.len())
            .map(|i| {
                let r = &pairs.refs[i];
                let row = self.features.row(pairs.xs[i], r.choice, r.k);
                (self.regressor_for(&r.group).predict_row(&row) - pairs.ys[i]).powi(2)
            })
            .sum();
        Ok(sum / pairs.len() as f64)
    }
}

/// Fits every grid candidate on `train` and keeps the one with the smallest
/// dev MSE; exact ties go to the earlier (simpler) candidate.
pub fn train_calibrator(
    setting: SettingId,
    train: &TrainingPairs,
    dev: &TrainingPairs,
    options: &CalibrationOptions,
) -> Result<CalibrationModel, CalibrationError> {
    if train.len() < 2 || dev.is_empty() {
        return Err(CalibrationError::TooFewPairs {
            train: train.len(),
            dev: dev.len(),
        });
    }
    let rows = (!options.features.is_default()).then(|| (train.rows(options.features), dev.rows(options.features)));
    // forests fan out internally, so candidates run in order
    let fits = map_slice(Execution::Sequential, &options.grid, |spec| {
        let (fitted, dev_mse) = match &rows {
            None => {
                let fitted = fit_with(spec, &train.xs, &train.ys, options.exec)?;
                let dev_mse = mse(&fitted, &dev.xs, &dev.ys)?;
                (fitted, dev_mse)
            }
            Some((train_rows, dev_rows)) => {
                let fitted = fit_rows(spec, train_rows, &train.ys, options.exec)?;
                let dev_mse = mse_rows(&fitted, dev_rows, &dev.ys)?;
                (fitted, dev_mse)
            }
        };
        Ok::<_, RegressorError>((fitted, dev_mse))
    });
    let mut candidates = Vec::with_capacity(fits.len());
    let mut best: Option<(usize, f64)> = None;
    let mut fitted_models = Vec::with_capacity(fits.len());
    for (i, (spec, result)) in options.grid.iter().zip(fits).enumerate() {
        match result {
            Ok((fitted, dev_mse)) => {
                if best.is_none_or(|(_, b)| dev_mse < b) {
                    best = Some((i, dev_mse));
                }
                candidates.push(CandidateResult {
                    label: spec.label(),
                    spec: spec.clone(),
                    dev_mse: Some(dev_mse),
                    error: None,
                });
                fitted_models.push(Some(fitted));
            }
            Err(e) => {
                candidates.push(CandidateResult {
                    label: spec.label(),
                    spec: spec.clone(),
                    dev_mse: None,
                    error: Some(e.to_string()),
                });
                fitted_models.push(None);
            }
        }
    }
    let (index, dev_mse) = best.ok_or_else(|| {
        CalibrationError::NoCandidateFit(
            candidates
                .iter()
                .filter_map(|c| c.error.clone())
                .next()
                .unwrap_or_else(|| "empty grid".into()),
        )
    })?;
    let group_models = if options.per_group {
        fit_group_models(&setting, train, dev, options)
    } else {
        Vec::new()
    };
    Ok(CalibrationModel {
        setting,
        fitted: fitted_models.swap_remove(index).expect("best candidate fitted"),
        selection: SelectionReport {
            chosen: candidates[index].label.clone(),
            chosen_dev_mse: dev_mse,
            candidates,
        },
        n_train_questions: train.questions().len(),
        n_train_pairs: train.len(),
        out_of_domain: false,
        source_datasets: Vec::new(),
        features: options.features,
        group_models,
    })
}

/// Per-group calibrators for every group with enough train and dev pairs.
fn fit_group_models(
    setting: &SettingId,
    train: &TrainingPairs,
    dev: &TrainingPairs,
    options: &CalibrationOptions,
) -> Vec<GroupModel> {
    let pooled_only = CalibrationOptions {
        per_group: false,
        ..options.clone()
    };
    let mut out = Vec::new();
    for group in train.groups() {
        let (gt, gd) = (train.for_group(group), dev.for_group(group));
        match train_calibrator(setting.clone(), &gt, &gd, &pooled_only) {
            Ok(m) => out.push(GroupModel {
                group: group.clone(),
                fitted: m.fitted,
                chosen: m.selection.chosen,
                chosen_dev_mse: m.selection.chosen_dev_mse,
                n_train_pairs: m.n_train_pairs,
            }),
            Err(e) => log::info!("{setting}: group {group} keeps the pooled calibrator ({e})"),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibrated {
    pub distribution: OpinionDistribution,
    /// Set when every calibrated entry was clipped away.
    pub degenerate_fallback: bool,
}

/// Maps each entry through `fitted`, clips negatives and renormalizes.
pub fn apply_regressor(fitted: &FittedRegressor, d: &OpinionDistribution) -> Calibrated {
    apply_with_features(fitted, FeatureSet::Probability, d)
}

pub fn apply_with_features(fitted: &FittedRegressor, features: FeatureSet, d: &OpinionDistribution) -> Calibrated {
    let k = d.k();
    let mapped: Vec<f64> = d
        .probs()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let y = match features {
                FeatureSet::Probability => fitted.predict(x),
                _ => fitted.predict_row(&features.row(x, i, k)),
            };
            if y.is_finite() {
                y.max(0.0)
            } else {
                0.0
            }
        })
        .collect();
    if mapped == d.probs() {
        return Calibrated {
            distribution: d.clone(),
            degenerate_fallback: false,
        };
    }
    let mass: f64 = mapped.iter().sum();
    if mass <= DEGENERATE_MASS {
        return Calibrated {
            distribution: OpinionDistribution::uniform(d.k()).expect("k >= 2"),
            degenerate_fallback: true,
        };
    }
    match OpinionDistribution::renormalize(&mapped, NegativePolicy::ClipToZero) {
        Ok(distribution) => Calibrated {
            distribution,
            degenerate_fallback: false,
        },
        Err(_) => Calibrated {
            distribution: OpinionDistribution::uniform(d.k()).expect("k >= 2"),
            degenerate_fallback: true,
        },
    }
}

/// Applies the pooled calibrator.
pub fn apply_calibration(model: &CalibrationModel, d: &OpinionDistribution) -> Calibrated {
    apply_with_features(&model.fitted, model.features, d)
}

/// Applies the calibrator used for `group` (its own, or the pooled fallback).
pub fn apply_calibration_for(model: &CalibrationModel, group: &GroupKey, d: &OpinionDistribution) -> Calibrated {
    apply_with_features(model.regressor_for(group), model.features, d)
}

/// Alignment of one (question, group) cell before and after calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub question_id: String,
    pub group: GroupKey,
    pub before: f64,
    pub after: f64,
    pub degenerate_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rows: Vec<EvalRow>,
    pub mean_before: f64,
    pub mean_after: f64,
    /// Regression MSE on the evaluated pairs.
    pub pair_mse: f64,
    #[serde(default)]
    pub out_of_domain: bool,
}

/// Scores records from `which` against gold, with and without calibration.
pub fn evaluate(
    model: &CalibrationModel,
    records: &[ElicitationRecord],
    gold: &GoldTable,
    splits: &SplitAssignment,
    which: &[Split],
) -> Result<EvaluationReport, CalibrationError> {
    let pairs = build_pairs(records, gold, splits, which)?;
    let mut rows = Vec::new();
    for record in records {
        let q = &record.key.question_id;
        if !splits.get(q).is_some_and(|s| which.contains(&s)) {
            continue;
        }
        let pooled = model.group_models.is_empty().then(|| apply_calibration(model, &record.distribution));
        for group in target_groups(record, gold) {
            let calibrated = match &pooled {
                Some(c) => c.clone(),
                None => apply_calibration_for(model, &group, &record.distribution),
            };
            let g = gold.distribution(q, &group).ok_or_else(|| CalibrationError::MissingGold {
                question_id: q.clone(),
                group: group.clone(),
            })?;
            rows.push(EvalRow {
                question_id: q.clone(),
                group,
                before: opinion_alignment(&record.distribution, g)?.value(),
                after: opinion_alignment(&calibrated.distribution, g)?.value(),
                degenerate_fallback: calibrated.degenerate_fallback,
            });
        }
    }
    let n = rows.len() as f64;
    Ok(EvaluationReport {
        mean_before: rows.iter().map(|r| r.before).sum::<f64>() / n,
        mean_after: rows.iter().map(|r| r.after).sum::<f64>() / n,
        pair_mse: model.pair_mse(&pairs)?,
        rows,
        out_of_domain: false,
    })
}

/// Dataset id of a setting's records; taken from the caller since records
/// carry only question ids.
pub fn calibrate_setting(
    dataset: &str,
    records: &[ElicitationRecord],
    gold: &GoldTable,
    splits: &SplitAssignment,
    options: &CalibrationOptions,
) -> Result<(CalibrationModel, EvaluationReport), CalibrationError> {
    let first = records.first().ok_or(CalibrationError::EmptySelection)?;
    let setting = SettingId::new(dataset, first.setting());
    let train = build_pairs(records, gold, splits, &[Split::Train])?;
    let dev = build_pairs(records, gold, splits, &[Split::Dev])?;
    let model = train_calibrator(setting, &train, &dev, options)?;
    let report = evaluate(&model, records, gold, splits, &[Split::Test])?;
    Ok((model, report))
}

/// Training-set size for a supervision curve point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SupervisionSize {
    Questions(usize),
    Full,
}

impl fmt::Display for SupervisionSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SupervisionSize::Questions(n) => write!(f, "{n}"),
            SupervisionSize::Full => f.write_str("full"),
        }
    }
}

impl std::str::FromStr for SupervisionSize {
    type Err = CalibrationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "full" => Ok(SupervisionSize::Full),
            t => match t.parse::<usize>() {
                Ok(n) if n > 0 => Ok(SupervisionSize::Questions(n)),
                _ => Err(CalibrationError::InvalidSize(t.to_string())),
            },
        }
    }
}

/// Sizes used by default: 1, 5, 10, 50, 100, 200, then full.
pub fn default_sizes() -> Vec<SupervisionSize> {
    let mut sizes: Vec<SupervisionSize> = [1, 5, 10, 50, 100, 200]
        .into_iter()
        .map(SupervisionSize::Questions)
        .collect();
    sizes.push(SupervisionSize::Full);
    sizes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed_index: usize,
    pub test_mse: f64,
    pub test_alignment: f64,
    pub chosen: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub size: SupervisionSize,
    /// Number of train questions actually used.
    pub effective_questions: usize,
    pub clamped: bool,
    pub mean_test_mse: f64,
    pub mean_test_alignment: f64,
    pub seeds: Vec<SeedResult>,
    /// Seeds where no candidate could be fitted (e.g. one question with a
    /// constant elicited distribution).
    pub failed_seeds: usize,
}

/// Retrains on `size` sampled train questions per seed (dev selection is
/// rerun each time) and scores on the fixed test split.
#[allow(clippy::too_many_arguments)]
pub fn minimal_supervision_curve(
    dataset: &str,
    records: &[ElicitationRecord],
    gold: &GoldTable,
    splits: &SplitAssignment,
    sizes: &[SupervisionSize],
    n_seeds: usize,
    seed: u64,
    options: &CalibrationOptions,
    exec: Execution,
) -> Result<Vec<CurvePoint>, CalibrationError> {
    let first = records.first().ok_or(CalibrationError::EmptySelection)?;
    let setting = SettingId::new(dataset, first.setting());
    let train = build_pairs(records, gold, splits, &[Split::Train])?;
    let dev = build_pairs(records, gold, splits, &[Split::Dev])?;
    let test = build_pairs(records, gold, splits, &[Split::Test])?;
    let train_questions: Vec<&str> = train.questions().into_iter().collect();
    let n_train = train_questions.len();
    let n_seeds = n_seeds.max(1);

    let resolved: Vec<(SupervisionSize, usize, bool)> = sizes
        .iter()
        .map(|&size| match size {
            SupervisionSize::Full => (size, n_train, false),
            SupervisionSize::Questions(n) if n > n_train => {
                log::warn!("{setting}: supervision size {n} exceeds {n_train} train questions; using all");
                (size, n_train, true)
            }
            SupervisionSize::Questions(n) => (size, n, false),
        })
        .collect();

    let jobs = resolved.len() * n_seeds;
    let results = map_range(exec, jobs, |job| {
        let (size, count, _) = resolved[job / n_seeds];
        let seed_index = job % n_seeds;
        let subset = if count >= n_train {
            train.clone()
        } else {
            let mut rng = SeedMixer::new(seed)
                .str("min-supervision")
                .str(dataset)
                .str(&size.to_string())
                .u64(seed_index as u64)
                .rng();
            let keep: BTreeSet<&str> = train_questions.choose_multiple(&mut rng, count).copied().collect();
            train.restrict(&keep)
        };
        let seed_options = CalibrationOptions {
            exec: Execution::Sequential,
            ..options.clone()
        };
        let model = train_calibrator(setting.clone(), &subset, &dev, &seed_options).ok()?;
        let test_mse = model.pair_mse(&test).ok()?;
        let report = evaluate(&model, records, gold, splits, &[Split::Test]).ok()?;
        Some(SeedResult {
            seed_index,
            test_mse,
            test_alignment: report.mean_after,
            chosen: model.selection.chosen,
        })
    });

    let mut points = Vec::with_capacity(resolved.len());
    for (i, &(size, count, clamped)) in resolved.iter().enumerate() {
        let seeds: Vec<SeedResult> = results[i * n_seeds..(i + 1) * n_seeds].iter().flatten().cloned().collect();
        let failed_seeds = n_seeds - seeds.len();
        let n = seeds.len() as f64;
        let (mean_test_mse, mean_test_alignment) = if seeds.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (
                seeds.iter().map(|s| s.test_mse).sum::<f64>() / n,
                seeds.iter().map(|s| s.test_alignment).sum::<f64>() / n,
            )
        };
        points.push(CurvePoint {
            size,
            effective_questions: count,
            clamped,
            mean_test_mse,
            mean_test_alignment,
            seeds,
            failed_seeds,
        });
    }
    Ok(points)
}

/// One dataset's inputs to cross-dataset calibration.
#[derive(Debug, Clone, Copy)]
pub struct DatasetView<'a> {
    pub name: &'a str,
    pub records: &'a [ElicitationRecord],
    pub gold: &'a GoldTable,
    pub splits: &'a SplitAssignment,
}

/// Trains on every dataset except `holdout` and evaluates on the holdout's
/// test split. Source train and test questions form the training set; source
/// dev questions drive model selection.
pub fn cross_dataset_calibrate(
    datasets: &[DatasetView<'_>],
    holdout: &str,
    options: &CalibrationOptions,
) -> Result<(CalibrationModel, EvaluationReport), CalibrationError> {
    let target = datasets
        .iter()
        .find(|d| d.name == holdout)
        .ok_or_else(|| CalibrationError::UnknownDataset(holdout.to_string()))?;
    let sources: Vec<&DatasetView<'_>> = datasets.iter().filter(|d| d.name != holdout).collect();
    if sources.len() < 2 {
        return Err(CalibrationError::TooFewDatasets(sources.len()));
    }
    let first = target.records.first().ok_or(CalibrationError::EmptySelection)?;
    let mut train = TrainingPairs::default();
    let mut dev = TrainingPairs::default();
    for s in &sources {
        check_one_setting(s.records)?;
        if let Some(r) = s.records.first() {
            if r.setting() != first.setting() {
                return Err(CalibrationError::MixedSettings(
                    setting_label(r.setting()),
                    setting_label(first.setting()),
                ));
            }
        }
        train.extend(build_pairs(s.records, s.gold, s.splits, &[Split::Train, Split::Test])?);
        dev.extend(build_pairs(s.records, s.gold, s.splits, &[Split::Dev])?);
    }
    let setting = SettingId::new(format!("ood-{holdout}"), first.setting());
    let mut model = train_calibrator(setting, &train, &dev, options)?;
    model.out_of_domain = true;
    model.source_datasets = sources.iter().map(|s| s.name.to_string()).collect();
    let mut report = evaluate(&model, target.records, target.gold, target.splits, &[Split::Test])?;
    report.out_of_domain = true;
    Ok((model, report))
}

pub fn save_model(dir: &Path, model: &CalibrationModel) -> Result<PathBuf, CalibrationError> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let path = dir.join(model.setting.file_name());
    let text = serde_json::to_string_pretty(model).expect("model serializes");
    std::fs::write(&path, text).map_err(|e| io_error(&path, e))?;
    Ok(path)
}

pub fn load_model(path: &Path) -> Result<CalibrationModel, CalibrationError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_error(path, e))
}

/// Every `*.json` model in `dir`, keyed by setting.
pub fn load_registry(dir: &Path) -> Result<BTreeMap<SettingId, CalibrationModel>, CalibrationError> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| io_error(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for path in paths {
        let model = load_model(&path)?;
        out.insert(model.setting.clone(), model);
    }
    Ok(out)
}
