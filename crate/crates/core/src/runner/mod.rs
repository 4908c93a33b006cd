//! Grid orchestration: ingest, split, elicit, calibrate and evaluate every
//! (dataset, provider, method, prompt kind) cell, then assemble reports.

mod report;

pub use report::{
    emit_reports, read_report, significance_table, AlignmentReport, CellFailure, CurveRow, DatasetAggregate, GroupRow,
    RowTest, SettingResult, StdPoint,
    Summary, ALPHA, REPORT_FILES, SUMMARY_SCHEMA,
};

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{
    build_pairs, cross_dataset_calibrate, evaluate, minimal_supervision_curve, save_model, train_calibrator,
    CalibrationError, CalibrationModel, CalibrationOptions, FeatureSet, DatasetView, EvaluationReport, SettingId, SupervisionSize,
    TrainingPairs,
};
use crate::elicitation::{elicit_all, write_records, ElicitOptions, ElicitationRecord, TemplateSet};
use crate::exec::{map_range, map_slice, with_workers, Execution};
use crate::ingest::{
    load_dataset, make_splits, GoldFile, GoldTable, IngestError, Split, SplitAssignment, DEFAULT_MIN_GROUP_COUNT,
};
use crate::opinion::{ElicitationMethod, PromptKind, SurveyQuestion};
use crate::providers::{Client, Provider, ProviderConfig, ProviderError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("dataset `{dataset}`: {source}")]
    Ingest {
        dataset: String,
        #[source]
        source: IngestError,
    },
    #[error("provider `{model_id}`: {source}")]
    Provider {
        model_id: String,
        #[source]
        source: ProviderError,
    },
    #[error("templates: {0}")]
    Templates(String),
    #[error("test question {question_id} leaked into training of {setting}")]
    Leakage { setting: String, question_id: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub(crate) fn io_error(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Where one dataset's inputs live. Give either `respondents` (raw survey
/// answers) or `gold` (a prepared gold file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    #[serde(default)]
    pub questions: Option<PathBuf>,
    #[serde(default)]
    pub respondents: Option<PathBuf>,
    #[serde(default)]
    pub gold: Option<PathBuf>,
    /// Generated from the experiment seed when absent.
    #[serde(default)]
    pub splits: Option<PathBuf>,
}

/// Accepts `5` or `"full"` in TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SizeEntry {
    Count(usize),
    Named(String),
}

impl SizeEntry {
    fn resolve(&self) -> Result<SupervisionSize, RunError> {
        match self {
            SizeEntry::Count(n) => n
                .to_string()
                .parse()
                .map_err(|e: CalibrationError| RunError::Config(e.to_string())),
            SizeEntry::Named(s) => s.parse().map_err(|e: CalibrationError| RunError::Config(e.to_string())),
        }
    }
}

fn default_methods() -> Vec<ElicitationMethod> {
    ElicitationMethod::ALL.to_vec()
}
fn default_kinds() -> Vec<PromptKind> {
    vec![PromptKind::Base, PromptKind::Sd]
}
fn default_out() -> PathBuf {
    PathBuf::from("results")
}
fn default_curve_seeds() -> usize {
    crate::calibration::DEFAULT_SEEDS
}
fn default_min_group() -> u64 {
    DEFAULT_MIN_GROUP_COUNT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub datasets: Vec<DatasetConfig>,
    pub providers: Vec<ProviderConfig>,
    #[serde(default = "default_methods")]
    pub methods: Vec<ElicitationMethod>,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<PromptKind>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Empty disables the minimal-supervision study.
    #[serde(default)]
    pub min_supervision: Vec<SizeEntry>,
    #[serde(default = "default_curve_seeds")]
    pub min_supervision_seeds: usize,
    /// Adds leave-one-dataset-out rows for this dataset.
    #[serde(default)]
    pub holdout: Option<String>,
    /// 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    /// Defaults to `<out>/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    #[serde(default = "default_min_group")]
    pub min_group_count: u64,
    /// Regressor inputs; anything but `probability` is a research option.
    #[serde(default)]
    pub features: FeatureSet,
    /// Fit one calibrator per demographic group. Research option.
    #[serde(default)]
    pub per_group_calibration: bool,
    /// Relative paths resolve against this; set by [`ExperimentConfig::load`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    /// Labels of the non-default calibration options, e.g. `per-group-calibration`.
    pub fn research_options(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.features.is_default() {
            out.push(format!("features={}", self.features));
        }
        if self.per_group_calibration {
            out.push("per-group-calibration".to_string());
        }
        out
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, RunError> {
        let mut config: ExperimentConfig = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        config.base_dir = base_dir.to_path_buf();
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &base)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if self.datasets.is_empty() {
            return bad("at least one dataset is required".into());
        }
        if self.providers.is_empty() {
            return bad("at least one provider is required".into());
        }
        if self.methods.is_empty() {
            return bad("at least one elicitation method is required".into());
        }
        if self.kinds.is_empty() {
            return bad("at least one prompt kind is required".into());
        }
        let mut names = BTreeSet::new();
        for d in &self.datasets {
            if d.name.trim().is_empty() || d.name.contains("__") {
                return bad(format!("dataset name `{}` must be non-empty and free of `__`", d.name));
            }
            if !names.insert(d.name.as_str()) {
                return bad(format!("dataset `{}` listed twice", d.name));
            }
            match (&d.respondents, &d.gold) {
                (Some(_), None) if d.questions.is_some() => {}
                (None, Some(_)) => {}
                _ => {
                    return bad(format!(
                        "dataset `{}` needs questions + respondents, or a gold file",
                        d.name
                    ))
                }
            }
        }
        let mut models = BTreeSet::new();
        for p in &self.providers {
            p.validate().map_err(|e| RunError::Config(format!("provider `{}`: {e}", p.model_id)))?;
            if p.model_id.contains("__") {
                return bad(format!("model id `{}` must not contain `__`", p.model_id));
            }
            if !models.insert(p.model_id.as_str()) {
                return bad(format!("provider `{}` listed twice", p.model_id));
            }
        }
        for s in &self.min_supervision {
            s.resolve()?;
        }
        if let Some(h) = &self.holdout {
            if !names.contains(h.as_str()) {
                return bad(format!("holdout `{h}` is not a configured dataset"));
            }
            if names.len() < 3 {
                return bad(format!("holdout needs >= 2 source datasets, have {}", names.len() - 1));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.out)
    }

    pub fn cache_path(&self) -> PathBuf {
        match &self.cache_dir {
            Some(c) => self.resolve(c),
            None => self.out_dir().join("cache"),
        }
    }

    pub fn supervision_sizes(&self) -> Result<Vec<SupervisionSize>, RunError> {
        self.min_supervision.iter().map(SizeEntry::resolve).collect()
    }
}

/// One dataset after ingestion and splitting.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub name: String,
    pub questions: Vec<SurveyQuestion>,
    pub gold: GoldTable,
    pub splits: SplitAssignment,
}

pub fn load_datasets(config: &ExperimentConfig) -> Result<Vec<LoadedDataset>, RunError> {
    config
        .datasets
        .iter()
        .map(|d| {
            let wrap = |source| RunError::Ingest {
                dataset: d.name.clone(),
                source,
            };
            let (questions, gold) = match (&d.questions, &d.respondents, &d.gold) {
                (Some(q), Some(r), _) => {
                    load_dataset(&config.resolve(q), &config.resolve(r), config.min_group_count).map_err(wrap)?
                }
                (_, _, Some(g)) => GoldFile::read(&config.resolve(g)).map_err(wrap)?.into_parts(),
                _ => return Err(RunError::Config(format!("dataset `{}` has no inputs", d.name))),
            };
            let splits = match &d.splits {
                Some(s) => SplitAssignment::read(&config.resolve(s)).map_err(wrap)?,
                None => make_splits(&questions, config.seed).map_err(wrap)?,
            };
            Ok(LoadedDataset {
                name: d.name.clone(),
                questions,
                gold,
                splits,
            })
        })
        .collect()
}

/// One grid cell.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub dataset: String,
    pub model_id: String,
    pub method: ElicitationMethod,
    pub kind: PromptKind,
}

impl Cell {
    pub fn label(&self) -> String {
        format!("{}__{}__{}__{}", self.dataset, self.model_id, self.method, self.kind)
    }
}

/// Fails if any question used for fitting or selection sits in the test split.
pub fn check_leakage(
    setting: &SettingId,
    fitting: &[&TrainingPairs],
    test_questions: &BTreeSet<&str>,
) -> Result<(), RunError> {
    for pairs in fitting {
        if let Some(r) = pairs.refs.iter().find(|r| test_questions.contains(r.question_id.as_str())) {
            return Err(RunError::Leakage {
                setting: setting.file_name(),
                question_id: r.question_id.clone(),
            });
        }
    }
    Ok(())
}

/// Outcome of calibrating and evaluating one setting.
#[derive(Debug, Clone)]
pub struct CalibratedCell {
    pub model: CalibrationModel,
    pub report: EvaluationReport,
    pub curve: Vec<crate::calibration::CurvePoint>,
}

fn calibrate_cell(
    ds: &LoadedDataset,
    records: &[ElicitationRecord],
    sizes: &[SupervisionSize],
    config: &ExperimentConfig,
    options: &CalibrationOptions,
) -> Result<CalibratedCell, String> {
    let first = records.first().ok_or("no elicited records")?;
    let setting = SettingId::new(ds.name.clone(), first.setting());
    let train = build_pairs(records, &ds.gold, &ds.splits, &[Split::Train]).map_err(|e| e.to_string())?;
    let dev = build_pairs(records, &ds.gold, &ds.splits, &[Split::Dev]).map_err(|e| e.to_string())?;
    let test_ids: BTreeSet<&str> = ds.splits.questions_in(Split::Test).map(String::as_str).collect();
    check_leakage(&setting, &[&train, &dev], &test_ids).map_err(|e| e.to_string())?;
    let model = train_calibrator(setting, &train, &dev, options).map_err(|e| e.to_string())?;
    let report = evaluate(&model, records, &ds.gold, &ds.splits, &[Split::Test]).map_err(|e| e.to_string())?;
    let curve = if sizes.is_empty() {
        Vec::new()
    } else {
        minimal_supervision_curve(
            &ds.name,
            records,
            &ds.gold,
            &ds.splits,
            sizes,
            config.min_supervision_seeds,
            config.seed,
            options,
            Execution::Sequential,
        )
        .map_err(|e| e.to_string())?
    };
    Ok(CalibratedCell { model, report, curve })
}

/// Everything a run produced, before file emission.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: AlignmentReport,
    pub network_calls: u64,
}

/// Runs the whole grid and writes reports, models and elicited records under
/// `config.out`. Cell failures are recorded in the report and do not stop
/// other cells.
pub fn run_grid(config: &ExperimentConfig, exec: Execution) -> Result<RunOutput, RunError> {
    config.validate()?;
    with_workers(exec, config.workers, || run_grid_inner(config, exec))
}

fn run_grid_inner(config: &ExperimentConfig, exec: Execution) -> Result<RunOutput, RunError> {
    let out = config.out_dir();
    let datasets = load_datasets(config)?;
    let sizes = config.supervision_sizes()?;
    let templates = match &config.templates_dir {
        Some(dir) => TemplateSet::from_dir(&config.resolve(dir)).map_err(|e| RunError::Templates(e.to_string()))?,
        None => TemplateSet::builtin(),
    };

    // mocks look up gold for any question, so they get the union of all datasets
    let mut merged = GoldTable::default();
    for ds in &datasets {
        for (q, g, e) in ds.gold.iter() {
            merged.insert(q, g.clone(), e.clone());
        }
    }
    let merged = Arc::new(merged);
    let cache = config.cache_path();
    let clients: Vec<Client> = config
        .providers
        .iter()
        .map(|p| {
            Client::from_config(p.clone(), Some(merged.clone()), Some(&cache)).map_err(|source| RunError::Provider {
                model_id: p.model_id.clone(),
                source,
            })
        })
        .collect::<Result<_, _>>()?;

    let split_dir = out.join("splits");
    std::fs::create_dir_all(&split_dir).map_err(|e| io_error(&split_dir, e))?;
    for ds in &datasets {
        let path = split_dir.join(format!("{}.json", ds.name));
        ds.splits.write(&path).map_err(|e| io_error(&path, e))?;
    }

    let mut cells = Vec::new();
    for (di, ds) in datasets.iter().enumerate() {
        for (pi, p) in config.providers.iter().enumerate() {
            for &method in &config.methods {
                for &kind in &config.kinds {
                    let cell = Cell {
                        dataset: ds.name.clone(),
                        model_id: p.model_id.clone(),
                        method,
                        kind,
                    };
                    cells.push((cell, di, pi));
                }
            }
        }
    }

    let elicit_options = ElicitOptions::default();
    let elicited: Vec<Result<Vec<ElicitationRecord>, String>> = map_slice(exec, &cells, |(cell, di, pi)| {
        let ds = &datasets[*di];
        let client = &clients[*pi];
        if cell.method == ElicitationMethod::Logprob && !client.supports_logprobs() {
            return Err("provider does not expose log-probabilities".to_string());
        }
        let run = elicit_all(
            cell.method,
            client,
            &templates,
            &ds.questions,
            &ds.gold,
            cell.kind,
            &elicit_options,
            Execution::Sequential,
        )
        .map_err(|e| e.to_string())?;
        if run.records.is_empty() {
            return Err(format!("every elicitation failed ({} cells)", run.failures.len()));
        }
        Ok(run.records)
    });

    let mut failures = Vec::new();
    let elicited_dir = out.join("elicited");
    std::fs::create_dir_all(&elicited_dir).map_err(|e| io_error(&elicited_dir, e))?;
    for ((cell, _, _), result) in cells.iter().zip(&elicited) {
        match result {
            Ok(records) => {
                let path = elicited_dir.join(format!("{}.jsonl", cell.label()));
                write_records(&path, records).map_err(|e| io_error(&path, e))?;
            }
            Err(message) => {
                log::warn!("{}: elicitation failed: {message}", cell.label());
                failures.push(CellFailure::new(cell, "elicit", message));
            }
        }
    }

    for option in config.research_options() {
        log::warn!("research option `{option}` is on; results do not follow the pooled-calibrator protocol");
    }
    let options = CalibrationOptions {
        exec: Execution::Sequential,
        features: config.features,
        per_group: config.per_group_calibration,
        ..CalibrationOptions::with_seed(config.seed)
    };
    let calibrated: Vec<Option<Result<CalibratedCell, String>>> = map_range(exec, cells.len(), |i| {
        let records = elicited[i].as_ref().ok()?;
        Some(calibrate_cell(&datasets[cells[i].1], records, &sizes, config, &options))
    });

    let model_dir = out.join("models");
    std::fs::create_dir_all(&model_dir).map_err(|e| io_error(&model_dir, e))?;
    let mut results = Vec::new();
    for ((cell, _, _), outcome) in cells.iter().zip(calibrated) {
        match outcome {
            None => {}
            Some(Err(message)) => {
                log::warn!("{}: calibration failed: {message}", cell.label());
                failures.push(CellFailure::new(cell, "calibrate", &message));
            }
            Some(Ok(done)) => {
                save_model(&model_dir, &done.model).map_err(|e| io_error(&model_dir, e))?;
                results.push((cell.clone(), done));
            }
        }
    }

    if let Some(holdout) = &config.holdout {
        let settings: BTreeSet<(String, ElicitationMethod, PromptKind)> = cells
            .iter()
            .map(|(c, _, _)| (c.model_id.clone(), c.method, c.kind))
            .collect();
        let jobs: Vec<(String, ElicitationMethod, PromptKind)> = settings.into_iter().collect();
        let ood = map_slice(exec, &jobs, |(model_id, method, kind)| {
            let mut views = Vec::new();
            for (i, (cell, di, _)) in cells.iter().enumerate() {
                if &cell.model_id == model_id && cell.method == *method && cell.kind == *kind {
                    let Ok(records) = &elicited[i] else {
                        return Err(format!("{} has no elicited records", cell.label()));
                    };
                    let ds = &datasets[*di];
                    views.push(DatasetView {
                        name: &ds.name,
                        records,
                        gold: &ds.gold,
                        splits: &ds.splits,
                    });
                }
            }
            let target = datasets.iter().find(|d| &d.name == holdout).expect("validated holdout");
            let test_ids: BTreeSet<&str> = target.splits.questions_in(Split::Test).map(String::as_str).collect();
            for v in views.iter().filter(|v| v.name != holdout) {
                if let Some(q) = v.records.iter().find(|r| test_ids.contains(r.key.question_id.as_str())) {
                    return Err(format!("holdout test question {} also appears in {}", q.key.question_id, v.name));
                }
            }
            let (model, report) = cross_dataset_calibrate(&views, holdout, &options).map_err(|e| e.to_string())?;
            Ok(CalibratedCell {
                model,
                report,
                curve: Vec::new(),
            })
        });
        for ((model_id, method, kind), outcome) in jobs.iter().zip(ood) {
            let cell = Cell {
                dataset: format!("ood-{holdout}"),
                model_id: model_id.clone(),
                method: *method,
                kind: *kind,
            };
            match outcome {
                Ok(done) => {
                    save_model(&model_dir, &done.model).map_err(|e| io_error(&model_dir, e))?;
                    results.push((cell, done));
                }
                Err(message) => {
                    log::warn!("{}: out-of-domain calibration failed: {message}", cell.label());
                    failures.push(CellFailure::new(&cell, "calibrate", &message));
                }
            }
        }
    }

    let mut report = AlignmentReport::assemble(config.seed, &results, failures);
    report.research_options = config.research_options();
    emit_reports(&report, &out)?;
    let network_calls = clients.iter().map(Client::network_calls).sum();
    Ok(RunOutput { report, network_calls })
}

/// Groups elicited records by setting, keeping file order inside each group.
pub fn group_by_setting(records: Vec<ElicitationRecord>) -> BTreeMap<crate::opinion::Setting, Vec<ElicitationRecord>> {
    let mut out: BTreeMap<crate::opinion::Setting, Vec<ElicitationRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.setting().clone()).or_default().push(r);
    }
    out
}
