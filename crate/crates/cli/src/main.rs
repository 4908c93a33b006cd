use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use dist_align::calibration::{
    calibrate_setting, cross_dataset_calibrate, evaluate, load_registry, minimal_supervision_curve, save_model,
    CalibrationOptions, DatasetView, FeatureSet, SettingId, SupervisionSize,
};
use dist_align::elicitation::{elicit_all, read_records, write_records, ElicitOptions, ElicitationRecord, TemplateSet};
use dist_align::ingest::{load_dataset, make_splits, GoldFile, GoldTable, Split, SplitAssignment};
use dist_align::opinion::{ElicitationMethod, PromptKind, SurveyQuestion};
use dist_align::providers::{Client, ProviderConfig};
use dist_align::runner::{
    emit_reports, group_by_setting, read_report, run_grid, AlignmentReport, CalibratedCell, Cell, ExperimentConfig,
};
use dist_align::synth::{benchmark_case, generate_world, write_world, BenchmarkCase, SyntheticSpec};
use dist_align::Execution;

#[derive(Parser)]
#[command(name = "dist-align", version, about = "Elicit, calibrate and evaluate opinion distributions")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
}

impl Common {
    fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::default()
        }
    }

    fn out(&self) -> Result<&Path> {
        self.out.as_deref().context("--out is required for this command")
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Aggregate respondent answers into a gold file plus a split assignment.
    Ingest(IngestArgs),
    /// Elicit distributions for one (provider, method, prompt kind) setting.
    Elicit(ElicitArgs),
    /// Fit calibrators and write them to a model registry directory.
    Calibrate(CalibrateArgs),
    /// Score elicited records with registered calibrators and write reports.
    Evaluate(EvaluateArgs),
    /// Re-emit CSV and summary files from a saved report.json.
    Report(ReportArgs),
    /// Generate a synthetic survey world.
    Synth(SynthArgs),
    /// Run the full experiment grid from --config.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    research: ResearchArgs,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    questions: PathBuf,
    /// JSON Lines, or CSV when the extension is .csv.
    #[arg(long)]
    respondents: PathBuf,
    #[arg(long, default_value_t = dist_align::ingest::DEFAULT_MIN_GROUP_COUNT)]
    min_group_count: u64,
    /// Where to write the split assignment; defaults to splits.json next to the gold file.
    #[arg(long)]
    splits: Option<PathBuf>,
}

#[derive(Args)]
struct ElicitArgs {
    #[arg(long)]
    gold: PathBuf,
    /// Provider config (TOML).
    #[arg(long)]
    provider: PathBuf,
    #[arg(long)]
    method: ElicitationMethod,
    #[arg(long)]
    prompt: PromptKind,
    /// Directory overriding the built-in prompt templates.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Response cache directory; omit to disable caching.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Elicited records; repeat together with --gold and --splits for --holdout.
    #[arg(long, required = true)]
    elicited: Vec<PathBuf>,
    #[arg(long, required = true)]
    gold: Vec<PathBuf>,
    #[arg(long, required = true)]
    splits: Vec<PathBuf>,
    /// Comma-separated training sizes in questions, e.g. 1,5,10,50,full.
    #[arg(long, value_delimiter = ',')]
    min_supervision: Vec<SupervisionSize>,
    #[arg(long, default_value_t = dist_align::calibration::DEFAULT_SEEDS)]
    min_supervision_seeds: usize,
    /// Train on the other datasets and evaluate on this one.
    #[arg(long)]
    holdout: Option<String>,
    #[command(flatten)]
    research: ResearchArgs,
}

/// Calibration variants outside the pooled scalar protocol. Off by default.
#[derive(Args, Clone)]
struct ResearchArgs {
    /// Regressor inputs: `probability` or `probability-position` (adds choice position and k).
    #[arg(long)]
    features: Option<FeatureSet>,
    /// Fit one calibrator per demographic group instead of one pooled calibrator.
    #[arg(long)]
    per_group_calibration: bool,
}

impl ResearchArgs {
    fn apply(&self, options: &mut CalibrationOptions) {
        if let Some(f) = self.features {
            options.features = f;
        }
        options.per_group |= self.per_group_calibration;
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    elicited: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    splits: PathBuf,
    /// Dataset id of the models to use, e.g. `ood-wvs`; defaults to the gold file's dataset.
    #[arg(long)]
    model_dataset: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// A report.json written by `run` or `evaluate`.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic world spec (TOML); defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Also write a mock provider config for a benchmark case, e.g. `sharpen(2)`.
    #[arg(long)]
    case: Option<BenchmarkCase>,
}

fn dataset_name(questions: &[SurveyQuestion], path: &Path) -> Result<String> {
    questions
        .first()
        .map(|q| q.dataset.clone())
        .with_context(|| format!("{} has no questions", path.display()))
}

fn read_gold(path: &Path) -> Result<(Vec<SurveyQuestion>, GoldTable)> {
    Ok(GoldFile::read(path)
        .with_context(|| format!("reading {}", path.display()))?
        .into_parts())
}

fn ingest(common: &Common, args: &IngestArgs) -> Result<()> {
    let out = common.out()?;
    let (questions, gold) = load_dataset(&args.questions, &args.respondents, args.min_group_count)?;
    let splits = make_splits(&questions, common.seed())?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    GoldFile::new(&questions, &gold).write(out)?;
    let split_path = args
        .splits
        .clone()
        .unwrap_or_else(|| out.with_file_name("splits.json"));
    splits.write(&split_path)?;
    println!(
        "{} questions, {} gold distributions -> {}; splits -> {}",
        questions.len(),
        gold.len(),
        out.display(),
        split_path.display()
    );
    Ok(())
}

fn elicit(common: &Common, args: &ElicitArgs) -> Result<()> {
    let out = common.out()?;
    let (questions, gold) = read_gold(&args.gold)?;
    let text = std::fs::read_to_string(&args.provider).with_context(|| format!("reading {}", args.provider.display()))?;
    let config = ProviderConfig::from_toml_str(&text)?;
    let client = Client::from_config(config, Some(Arc::new(gold.clone())), args.cache.as_deref())?;
    let templates = match &args.templates {
        Some(dir) => TemplateSet::from_dir(dir)?,
        None => TemplateSet::builtin(),
    };
    let exec = common.exec();
    let run = dist_align::exec::with_workers(exec, common.workers.unwrap_or(0), || {
        elicit_all(
            args.method,
            &client,
            &templates,
            &questions,
            &gold,
            args.prompt,
            &ElicitOptions::default(),
            exec,
        )
    })?;
    write_records(out, &run.records)?;
    for f in &run.failures {
        log::warn!("{} / {}: {}", f.question_id, f.group, f.message);
    }
    println!(
        "{} records, {} failed cells, {} provider calls -> {}",
        run.records.len(),
        run.failures.len(),
        client.network_calls(),
        out.display()
    );
    Ok(())
}

struct LoadedInputs {
    name: String,
    records: Vec<ElicitationRecord>,
    gold: GoldTable,
    splits: SplitAssignment,
}

fn load_inputs(elicited: &Path, gold: &Path, splits: &Path) -> Result<LoadedInputs> {
    let (questions, table) = read_gold(gold)?;
    Ok(LoadedInputs {
        name: dataset_name(&questions, gold)?,
        records: read_records(elicited)?,
        gold: table,
        splits: SplitAssignment::read(splits)?,
    })
}

fn print_report(label: &str, report: &dist_align::calibration::EvaluationReport) {
    println!(
        "{label}: alignment {:.2} -> {:.2} on {} test rows",
        100.0 * report.mean_before,
        100.0 * report.mean_after,
        report.rows.len()
    );
}

fn calibrate(common: &Common, args: &CalibrateArgs) -> Result<()> {
    let out = common.out()?;
    ensure!(
        args.elicited.len() == args.gold.len() && args.gold.len() == args.splits.len(),
        "--elicited, --gold and --splits must be given the same number of times"
    );
    let inputs: Vec<LoadedInputs> = args
        .elicited
        .iter()
        .zip(&args.gold)
        .zip(&args.splits)
        .map(|((e, g), s)| load_inputs(e, g, s))
        .collect::<Result<_>>()?;
    let exec = common.exec();
    let mut options = CalibrationOptions {
        exec,
        ..CalibrationOptions::with_seed(common.seed())
    };
    args.research.apply(&mut options);

    if let Some(holdout) = &args.holdout {
        ensure!(args.min_supervision.is_empty(), "--min-supervision is not available with --holdout");
        let grouped: Vec<(String, std::collections::BTreeMap<_, _>, &LoadedInputs)> = inputs
            .iter()
            .map(|i| (i.name.clone(), group_by_setting(i.records.clone()), i))
            .collect();
        let settings: std::collections::BTreeSet<_> = grouped.iter().flat_map(|g| g.1.keys().cloned()).collect();
        for setting in settings {
            let views: Vec<DatasetView<'_>> = grouped
                .iter()
                .filter_map(|(name, by_setting, i)| {
                    by_setting.get(&setting).map(|records| DatasetView {
                        name,
                        records,
                        gold: &i.gold,
                        splits: &i.splits,
                    })
                })
                .collect();
            let (model, report) = cross_dataset_calibrate(&views, holdout, &options)?;
            let path = save_model(out, &model)?;
            print_report(&model.setting.file_name(), &report);
            log::info!("wrote {}", path.display());
        }
        return Ok(());
    }

    for input in &inputs {
        for (_, records) in group_by_setting(input.records.clone()) {
            let (model, report) = calibrate_setting(&input.name, &records, &input.gold, &input.splits, &options)?;
            save_model(out, &model)?;
            print_report(&model.setting.file_name(), &report);
            println!("  chosen {} (dev MSE {:.4e})", model.selection.chosen, model.selection.chosen_dev_mse);
            if !args.min_supervision.is_empty() {
                let curve = minimal_supervision_curve(
                    &input.name,
                    &records,
                    &input.gold,
                    &input.splits,
                    &args.min_supervision,
                    args.min_supervision_seeds,
                    common.seed(),
                    &options,
                    exec,
                )?;
                for p in curve {
                    println!(
                        "  size {:>5} ({} questions): test MSE {:.4e}, alignment {:.2}",
                        p.size.to_string(),
                        p.effective_questions,
                        p.mean_test_mse,
                        100.0 * p.mean_test_alignment
                    );
                }
            }
        }
    }
    Ok(())
}

fn evaluate_cmd(common: &Common, args: &EvaluateArgs) -> Result<()> {
    let out = common.out()?;
    let input = load_inputs(&args.elicited, &args.gold, &args.splits)?;
    let registry = load_registry(&args.models)?;
    let model_dataset = args.model_dataset.clone().unwrap_or_else(|| input.name.clone());
    let mut cells = Vec::new();
    for (setting, records) in group_by_setting(input.records) {
        let id = SettingId::new(model_dataset.clone(), &setting);
        let Some(model) = registry.get(&id) else {
            bail!("no model {} in {}", id.file_name(), args.models.display());
        };
        let mut report = evaluate(model, &records, &input.gold, &input.splits, &[Split::Test])?;
        report.out_of_domain = model.out_of_domain;
        print_report(&id.file_name(), &report);
        let cell = Cell {
            dataset: input.name.clone(),
            model_id: setting.model_id.clone(),
            method: setting.method,
            kind: setting.prompt_kind,
        };
        cells.push((
            cell,
            CalibratedCell {
                model: model.clone(),
                report,
                curve: Vec::new(),
            },
        ));
    }
    let mut report = AlignmentReport::assemble(common.seed(), &cells, Vec::new());
    if let Some((_, c)) = cells.first() {
        if !c.model.features.is_default() {
            report.research_options.push(format!("features={}", c.model.features));
        }
        if !c.model.group_models.is_empty() {
            report.research_options.push("per-group-calibration".into());
        }
    }
    emit_reports(&report, out)?;
    println!("reports -> {}", out.display());
    Ok(())
}

fn report_cmd(common: &Common, args: &ReportArgs) -> Result<()> {
    let out = common.out()?;
    let report = read_report(&args.report)?;
    emit_reports(&report, out)?;
    let s = report.summary();
    println!(
        "{} settings, improved in {:.1}%, mean improvement {:+.2} points -> {}",
        s.n_settings,
        100.0 * s.fraction_improved.unwrap_or(0.0),
        s.mean_improvement.unwrap_or(0.0),
        out.display()
    );
    Ok(())
}

fn synth(common: &Common, args: &SynthArgs) -> Result<()> {
    let out = common.out()?;
    let mut spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            SyntheticSpec::from_toml_str(&text)?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    let world = generate_world(&spec)?;
    write_world(&world, out)?;
    for ds in &world.datasets {
        println!(
            "{}: {} questions, {} respondents",
            ds.name,
            ds.questions.len(),
            ds.respondents.len()
        );
    }
    if let Some(case) = args.case {
        let bundle = benchmark_case(case, spec.seed)?;
        let mut provider = ProviderConfig::mock(format!("mock-{}", case.to_string().replace(['(', ')', ','], "-")), bundle.distortion);
        provider.model_id = provider.model_id.trim_end_matches('-').to_string();
        let path = out.join("mock_provider.toml");
        std::fs::write(&path, toml::to_string(&provider)?)?;
        println!("{case}: {} -> {}", bundle.expectation.description, path.display());
    }
    Ok(())
}

fn run(common: &Common, args: &RunArgs) -> Result<()> {
    let path = common.config.as_deref().context("run needs --config experiment.toml")?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(workers) = common.workers {
        config.workers = workers;
    }
    if let Some(f) = args.research.features {
        config.features = f;
    }
    config.per_group_calibration |= args.research.per_group_calibration;
    if let Some(out) = &common.out {
        config.out = std::path::absolute(out)?;
    }
    let output = run_grid(&config, common.exec())?;
    let s = output.report.summary();
    for f in &s.failures {
        eprintln!(
            "failed cell {}/{}/{}/{} at {}: {}",
            f.dataset, f.model_id, f.method, f.kind, f.stage, f.message
        );
    }
    println!(
        "{} settings ({} failed cells), improved in {:.1}%, mean alignment {:.2} -> {:.2}, {} provider calls -> {}",
        s.n_settings,
        s.n_failed_cells,
        100.0 * s.fraction_improved.unwrap_or(0.0),
        s.mean_uncalibrated.unwrap_or(f64::NAN),
        s.mean_calibrated.unwrap_or(f64::NAN),
        output.network_calls,
        config.out_dir().display()
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let common = &cli.common;
    match &cli.command {
        Command::Ingest(a) => ingest(common, a),
        Command::Elicit(a) => elicit(common, a),
        Command::Calibrate(a) => calibrate(common, a),
        Command::Evaluate(a) => evaluate_cmd(common, a),
        Command::Report(a) => report_cmd(common, a),
        Command::Synth(a) => synth(common, a),
        Command::Run(a) => run(common, a),
    }
}
