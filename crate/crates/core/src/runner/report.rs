//! Report assembly, significance marking and CSV/JSON emission.
//!
//! Column order of every CSV is fixed by the header constants below.
//! Alignment columns are scaled by 100; every number uses 4 decimal places
//! except MSE, which uses 4 significant digits in scientific notation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_error, CalibratedCell, Cell, RunError};
use crate::calibration::{CurvePoint, EvalRow};
use crate::metrics::{paired_t_test, summarize, PairedTestResult, TestOutcome};
use crate::opinion::{ElicitationMethod, PromptKind};

pub const SUMMARY_SCHEMA: u32 = 1;
/// Significance level after Bonferroni correction.
pub const ALPHA: f64 = 0.05;

pub const REPORT_FILES: [&str; 6] = [
    "alignment.csv",
    "per_group.csv",
    "std_vs_alignment.csv",
    "min_supervision.csv",
    "summary.json",
    "report.json",
];

const ALIGNMENT_HEADER: [&str; 20] = [
    "dataset",
    "model",
    "method",
    "kind",
    "out_of_domain",
    "n_questions",
    "n_rows",
    "uncalibrated",
    "calibrated",
    "improvement",
    "std_uncalibrated",
    "std_calibrated",
    "t",
    "p",
    "p_bonferroni",
    "n_comparisons",
    "significant",
    "test_outcome",
    "regressor",
    "n_fallback",
];

const GROUP_HEADER: [&str; 17] = [
    "dataset",
    "model",
    "method",
    "kind",
    "out_of_domain",
    "attribute",
    "value",
    "n_questions",
    "uncalibrated",
    "calibrated",
    "improvement",
    "t",
    "p",
    "p_bonferroni",
    "n_comparisons",
    "significant",
    "test_outcome",
];

const STD_HEADER: [&str; 8] = [
    "dataset",
    "model",
    "method",
    "kind",
    "out_of_domain",
    "stage",
    "mean_alignment",
    "std_alignment",
];

const CURVE_HEADER: [&str; 11] = [
    "dataset",
    "model",
    "method",
    "kind",
    "size",
    "effective_questions",
    "clamped",
    "seeds_ok",
    "failed_seeds",
    "mean_test_mse",
    "mean_test_alignment",
];

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellFailure {
    pub dataset: String,
    pub model_id: String,
    pub method: ElicitationMethod,
    pub kind: PromptKind,
    pub stage: String,
    pub message: String,
}

impl CellFailure {
    pub(crate) fn new(cell: &Cell, stage: &str, message: &str) -> Self {
        CellFailure {
            dataset: cell.dataset.clone(),
            model_id: cell.model_id.clone(),
            method: cell.method,
            kind: cell.kind,
            stage: stage.to_string(),
            message: message.to_string(),
        }
    }
}

/// Paired test outcome for one report row, or why it could not be run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowTest {
    #[serde(default)]
    pub result: Option<PairedTestResult>,
    #[serde(default)]
    pub note: Option<String>,
    pub significant: bool,
}

impl RowTest {
    pub fn run(after: &[f64], before: &[f64]) -> Self {
        match paired_t_test(after, before, 1) {
            Ok(r) => RowTest {
                result: Some(r),
                note: None,
                significant: false,
            },
            Err(e) => RowTest {
                result: None,
                note: Some(e.to_string()),
                significant: false,
            },
        }
    }

    pub fn correct(&mut self, n_comparisons: usize) {
        if let Some(r) = &self.result {
            let r = r.with_comparisons(n_comparisons);
            self.significant = r.significant(ALPHA);
            self.result = Some(r);
        }
    }
}

/// One (dataset, model, method, kind) row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingResult {
    pub cell: Cell,
    pub out_of_domain: bool,
    pub model_file: String,
    pub regressor: String,
    pub n_questions: usize,
    /// Mean over evaluated (question, group) rows, in [0, 1].
    pub uncalibrated: f64,
    pub calibrated: f64,
    /// Sample std-dev over evaluated rows, in [0, 1].
    pub std_uncalibrated: f64,
    pub std_calibrated: f64,
    pub n_fallback: usize,
    /// Paired over questions, each question scored by its mean over groups.
    pub test: RowTest,
    pub rows: Vec<EvalRow>,
}

impl SettingResult {
    pub fn improvement(&self) -> f64 {
        self.calibrated - self.uncalibrated
    }
}

/// One (setting, demographic group) row, paired over questions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub cell: Cell,
    pub out_of_domain: bool,
    pub attribute: String,
    pub value: String,
    pub n_questions: usize,
    pub uncalibrated: f64,
    pub calibrated: f64,
    pub test: RowTest,
}

/// One minimal-supervision curve point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub cell: Cell,
    pub size: String,
    pub effective_questions: usize,
    pub clamped: bool,
    pub seeds_ok: usize,
    pub failed_seeds: usize,
    pub mean_test_mse: Option<f64>,
    pub mean_test_alignment: Option<f64>,
}

impl CurveRow {
    fn new(cell: &Cell, p: &CurvePoint) -> Self {
        let finite = |v: f64| v.is_finite().then_some(v);
        CurveRow {
            cell: cell.clone(),
            size: p.size.to_string(),
            effective_questions: p.effective_questions,
            clamped: p.clamped,
            seeds_ok: p.seeds.len(),
            failed_seeds: p.failed_seeds,
            mean_test_mse: finite(p.mean_test_mse),
            mean_test_alignment: finite(p.mean_test_alignment),
        }
    }
}

/// Fig.-2-shaped point: a setting's mean and spread at one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StdPoint {
    pub cell: Cell,
    pub out_of_domain: bool,
    pub stage: String,
    pub mean_alignment: f64,
    pub std_alignment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub schema: u32,
    pub seed: u64,
    pub settings: Vec<SettingResult>,
    pub groups: Vec<GroupRow>,
    pub curves: Vec<CurveRow>,
    pub failures: Vec<CellFailure>,
    /// Non-default calibration options in effect; results produced with any
    /// of these are not the pooled-calibrator protocol.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub research_options: Vec<String>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_of(xs: &[f64]) -> f64 {
    summarize(xs).map(|(_, s)| s).unwrap_or(0.0)
}

impl AlignmentReport {
    /// Builds rows from calibrated cells and marks significance.
    pub fn assemble(seed: u64, cells: &[(Cell, CalibratedCell)], mut failures: Vec<CellFailure>) -> Self {
        let mut settings = Vec::new();
        let mut groups = Vec::new();
        let mut curves = Vec::new();
        let mut ordered: Vec<&(Cell, CalibratedCell)> = cells.iter().collect();
        ordered.sort_by(|a, b| a.0.cmp(&b.0));
        for (cell, done) in ordered {
            let rows = &done.report.rows;
            if rows.is_empty() {
                failures.push(CellFailure::new(cell, "evaluate", "no test rows"));
                continue;
            }
            let out_of_domain = done.report.out_of_domain;
            let before: Vec<f64> = rows.iter().map(|r| r.before).collect();
            let after: Vec<f64> = rows.iter().map(|r| r.after).collect();

            let mut per_question: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
            let mut per_group: BTreeMap<&crate::opinion::GroupKey, Vec<&EvalRow>> = BTreeMap::new();
            for r in rows {
                let e = per_question.entry(r.question_id.as_str()).or_default();
                e.0 += r.before;
                e.1 += r.after;
                e.2 += 1;
                per_group.entry(&r.group).or_default().push(r);
            }
            let q_before: Vec<f64> = per_question.values().map(|(b, _, n)| b / *n as f64).collect();
            let q_after: Vec<f64> = per_question.values().map(|(_, a, n)| a / *n as f64).collect();

            settings.push(SettingResult {
                cell: cell.clone(),
                out_of_domain,
                model_file: done.model.setting.file_name(),
                regressor: done.model.selection.chosen.clone(),
                n_questions: per_question.len(),
                uncalibrated: mean(&before),
                calibrated: mean(&after),
                std_uncalibrated: std_of(&before),
                std_calibrated: std_of(&after),
                n_fallback: rows.iter().filter(|r| r.degenerate_fallback).count(),
                test: RowTest::run(&q_after, &q_before),
                rows: rows.clone(),
            });

            for (group, members) in per_group {
                if group.is_all() {
                    continue;
                }
                let b: Vec<f64> = members.iter().map(|r| r.before).collect();
                let a: Vec<f64> = members.iter().map(|r| r.after).collect();
                groups.push(GroupRow {
                    cell: cell.clone(),
                    out_of_domain,
                    attribute: group.attribute.clone(),
                    value: group.value.clone(),
                    n_questions: members.len(),
                    uncalibrated: mean(&b),
                    calibrated: mean(&a),
                    test: RowTest::run(&a, &b),
                });
            }
            curves.extend(done.curve.iter().map(|p| CurveRow::new(cell, p)));
        }
        failures.sort();
        let mut report = AlignmentReport {
            schema: SUMMARY_SCHEMA,
            seed,
            settings,
            groups,
            curves,
            failures,
            research_options: Vec::new(),
        };
        significance_table(&mut report);
        report
    }

    pub fn std_points(&self) -> Vec<StdPoint> {
        self.settings
            .iter()
            .flat_map(|s| {
                [
                    ("uncalibrated", s.uncalibrated, s.std_uncalibrated),
                    ("calibrated", s.calibrated, s.std_calibrated),
                ]
                .map(|(stage, m, sd)| StdPoint {
                    cell: s.cell.clone(),
                    out_of_domain: s.out_of_domain,
                    stage: stage.to_string(),
                    mean_alignment: m,
                    std_alignment: sd,
                })
            })
            .collect()
    }

    pub fn summary(&self) -> Summary {
        Summary::of(self)
    }
}

/// Applies Bonferroni within each emitted table: the family size is the
/// number of rows in that table that carry a test.
pub fn significance_table(report: &mut AlignmentReport) {
    let m = report.settings.iter().filter(|s| s.test.result.is_some()).count();
    for s in &mut report.settings {
        s.test.correct(m);
    }
    let m = report.groups.iter().filter(|g| g.test.result.is_some()).count();
    for g in &mut report.groups {
        g.test.correct(m);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetAggregate {
    pub n_settings: usize,
    pub mean_uncalibrated: f64,
    pub std_uncalibrated: f64,
    pub mean_calibrated: f64,
    pub std_calibrated: f64,
}

/// Contents of `summary.json`. Alignment values here are x100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: u32,
    pub seed: u64,
    pub alpha: f64,
    pub bonferroni_alignment_csv: usize,
    pub bonferroni_per_group_csv: usize,
    pub n_settings: usize,
    pub n_failed_cells: usize,
    pub fraction_improved: Option<f64>,
    pub mean_improvement: Option<f64>,
    pub mean_uncalibrated: Option<f64>,
    pub mean_calibrated: Option<f64>,
    pub fraction_significant: Option<f64>,
    /// Share of settings whose within-setting std-dev went down.
    pub fraction_std_lower: Option<f64>,
    /// Std-dev of setting means across all settings.
    pub std_across_settings_uncalibrated: Option<f64>,
    pub std_across_settings_calibrated: Option<f64>,
    pub per_dataset: BTreeMap<String, DatasetAggregate>,
    pub failures: Vec<CellFailure>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub research_options: Vec<String>,
}

impl Summary {
    pub fn of(report: &AlignmentReport) -> Self {
        let s = &report.settings;
        let n = s.len();
        let frac = |count: usize| (n > 0).then(|| count as f64 / n as f64);
        let pts = |f: &dyn Fn(&SettingResult) -> f64| -> Vec<f64> { s.iter().map(|x| 100.0 * f(x)).collect() };
        let before = pts(&|x| x.uncalibrated);
        let after = pts(&|x| x.calibrated);
        let delta = pts(&|x| x.improvement());
        let nonempty = |v: &[f64], f: fn(&[f64]) -> f64| (!v.is_empty()).then(|| f(v));

        let mut per_dataset: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for (x, (b, a)) in s.iter().zip(before.iter().zip(&after)) {
            let e = per_dataset.entry(x.cell.dataset.clone()).or_default();
            e.0.push(*b);
            e.1.push(*a);
        }
        Summary {
            schema: SUMMARY_SCHEMA,
            seed: report.seed,
            alpha: ALPHA,
            bonferroni_alignment_csv: s.iter().filter(|x| x.test.result.is_some()).count(),
            bonferroni_per_group_csv: report.groups.iter().filter(|g| g.test.result.is_some()).count(),
            n_settings: n,
            n_failed_cells: report.failures.len(),
            fraction_improved: frac(s.iter().filter(|x| x.calibrated > x.uncalibrated).count()),
            mean_improvement: nonempty(&delta, mean),
            mean_uncalibrated: nonempty(&before, mean),
            mean_calibrated: nonempty(&after, mean),
            fraction_significant: frac(s.iter().filter(|x| x.test.significant).count()),
            fraction_std_lower: frac(s.iter().filter(|x| x.std_calibrated < x.std_uncalibrated).count()),
            std_across_settings_uncalibrated: nonempty(&before, std_of),
            std_across_settings_calibrated: nonempty(&after, std_of),
            per_dataset: per_dataset
                .into_iter()
                .map(|(name, (b, a))| {
                    (
                        name,
                        DatasetAggregate {
                            n_settings: b.len(),
                            mean_uncalibrated: mean(&b),
                            std_uncalibrated: std_of(&b),
                            mean_calibrated: mean(&a),
                            std_calibrated: std_of(&a),
                        },
                    )
                })
                .collect(),
            failures: report.failures.clone(),
            research_options: report.research_options.clone(),
        }
    }
}

fn f4(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn pct(v: f64) -> String {
    f4(100.0 * v)
}

fn cell_fields(c: &Cell) -> [String; 4] {
    [
        c.dataset.clone(),
        c.model_id.clone(),
        c.method.to_string(),
        c.kind.to_string(),
    ]
}

fn outcome_label(o: TestOutcome) -> &'static str {
    match o {
        TestOutcome::Regular => "regular",
        TestOutcome::ZeroDifferences => "zero_differences",
        TestOutcome::ZeroVarianceDifferences => "zero_variance_differences",
    }
}

fn test_fields(t: &RowTest) -> [String; 6] {
    match &t.result {
        Some(r) => [
            f4(r.t_statistic),
            f4(r.p_value),
            f4(r.p_bonferroni),
            r.n_comparisons.to_string(),
            t.significant.to_string(),
            outcome_label(r.outcome).to_string(),
        ],
        None => [
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            "false".into(),
            t.note.clone().unwrap_or_default(),
        ],
    }
}

fn write_csv<const N: usize>(path: &Path, header: [&str; N], rows: Vec<Vec<String>>) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_error(path, e))?;
    w.write_record(header).map_err(|e| io_error(path, e))?;
    for row in rows {
        debug_assert_eq!(row.len(), N);
        w.write_record(&row).map_err(|e| io_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_error(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

/// Writes every file in [`REPORT_FILES`] into `outdir`.
pub fn emit_reports(report: &AlignmentReport, outdir: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(outdir).map_err(|e| io_error(outdir, e))?;

    let rows = report
        .settings
        .iter()
        .map(|s| {
            let mut row: Vec<String> = cell_fields(&s.cell).into();
            row.extend([
                s.out_of_domain.to_string(),
                s.n_questions.to_string(),
                s.rows.len().to_string(),
                pct(s.uncalibrated),
                pct(s.calibrated),
                pct(s.improvement()),
                pct(s.std_uncalibrated),
                pct(s.std_calibrated),
            ]);
            row.extend(test_fields(&s.test));
            row.extend([s.regressor.clone(), s.n_fallback.to_string()]);
            row
        })
        .collect();
    write_csv(&outdir.join("alignment.csv"), ALIGNMENT_HEADER, rows)?;

    let rows = report
        .groups
        .iter()
        .map(|g| {
            let mut row: Vec<String> = cell_fields(&g.cell).into();
            row.extend([
                g.out_of_domain.to_string(),
                g.attribute.clone(),
                g.value.clone(),
                g.n_questions.to_string(),
                pct(g.uncalibrated),
                pct(g.calibrated),
                pct(g.calibrated - g.uncalibrated),
            ]);
            row.extend(test_fields(&g.test));
            row
        })
        .collect();
    write_csv(&outdir.join("per_group.csv"), GROUP_HEADER, rows)?;

    let rows = report
        .std_points()
        .iter()
        .map(|p| {
            let mut row: Vec<String> = cell_fields(&p.cell).into();
            row.extend([
                p.out_of_domain.to_string(),
                p.stage.to_string(),
                pct(p.mean_alignment),
                pct(p.std_alignment),
            ]);
            row
        })
        .collect();
    write_csv(&outdir.join("std_vs_alignment.csv"), STD_HEADER, rows)?;

    let rows = report
        .curves
        .iter()
        .map(|c| {
            let mut row: Vec<String> = cell_fields(&c.cell).into();
            row.extend([
                c.size.clone(),
                c.effective_questions.to_string(),
                c.clamped.to_string(),
                c.seeds_ok.to_string(),
                c.failed_seeds.to_string(),
                c.mean_test_mse.map(|v| format!("{v:.4e}")).unwrap_or_default(),
                c.mean_test_alignment.map(pct).unwrap_or_default(),
            ]);
            row
        })
        .collect();
    write_csv(&outdir.join("min_supervision.csv"), CURVE_HEADER, rows)?;

    write_json(&outdir.join("summary.json"), &report.summary())?;
    write_json(&outdir.join("report.json"), report)
}

/// Reads a `report.json` written by [`emit_reports`].
pub fn read_report(path: &Path) -> Result<AlignmentReport, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_error(path, e))
}
