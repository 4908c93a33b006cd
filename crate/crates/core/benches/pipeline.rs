use std::path::Path;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dist_align::exec::map_slice;
use dist_align::opinion::{ElicitationMethod, PromptKind};
use dist_align::providers::{MockDistortion, ProviderConfig};
use dist_align::regressors::{fit_with, ForestParams, RegressorSpec};
use dist_align::runner::{run_grid, DatasetConfig, ExperimentConfig};
use dist_align::synth::{generate_world, write_world, SyntheticSpec, QUESTIONS_FILE, RESPONDENTS_FILE};
use dist_align::{opinion_alignment, Execution, OpinionDistribution};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn pairs(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let ys = xs.iter().map(|x| (x * x + 0.05 * rng.random::<f64>()).min(1.0)).collect();
    (xs, ys)
}

fn forest_fit(c: &mut Criterion) {
    let (xs, ys) = pairs(2000);
    let spec = RegressorSpec::RandomForest(ForestParams::default());
    let mut g = c.benchmark_group("forest_fit");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| fit_with(&spec, &xs, &ys, mode).unwrap())
        });
    }
    g.finish();
}

fn alignment_batch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut dist = |k: usize| {
        let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = w.iter().sum();
        OpinionDistribution::new(w.into_iter().map(|x| x / s).collect()).unwrap()
    };
    let batch: Vec<(OpinionDistribution, OpinionDistribution)> = (0..50_000).map(|i| (dist(2 + i % 9), dist(2 + i % 9))).collect();
    let mut g = c.benchmark_group("alignment_batch");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| map_slice(mode, &batch, |(p, q)| opinion_alignment(p, q).unwrap().value()))
        });
    }
    g.finish();
}

fn grid_config(dir: &Path) -> ExperimentConfig {
    let spec = SyntheticSpec {
        n_datasets: 1,
        n_questions: 20,
        respondents_per_group: 60,
        ..SyntheticSpec::default()
    };
    let world = generate_world(&spec).unwrap();
    write_world(&world, dir).unwrap();
    let datasets = world
        .datasets
        .iter()
        .map(|d| DatasetConfig {
            name: d.name.clone(),
            questions: Some(dir.join(&d.name).join(QUESTIONS_FILE)),
            respondents: Some(dir.join(&d.name).join(RESPONDENTS_FILE)),
            gold: None,
            splits: None,
        })
        .collect();
    ExperimentConfig {
        datasets,
        providers: (0..2)
            .map(|s| ProviderConfig::mock(format!("mock-{s}"), MockDistortion::sharpen(2.0, 0.05, s)))
            .collect(),
        methods: vec![ElicitationMethod::Verbalized, ElicitationMethod::Logprob],
        kinds: vec![PromptKind::Sd],
        seed: 0,
        out: dir.join("out"),
        min_supervision: Vec::new(),
        min_supervision_seeds: 2,
        holdout: None,
        workers: 0,
        cache_dir: None,
        templates_dir: None,
        min_group_count: 20,
        features: Default::default(),
        per_group_calibration: false,
        base_dir: dir.to_path_buf(),
    }
}

fn grid_run(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let config = grid_config(dir.path());
    let mut g = c.benchmark_group("grid_run");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| run_grid(&config, mode).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, forest_fit, alignment_batch, grid_run);
criterion_main!(benches);
