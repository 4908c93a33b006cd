use std::path::Path;
use std::process::{Command, Output};

fn dist_align(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dist-align"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("spawn dist-align")
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = dist_align(cwd, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL_SPEC: &str = "n_datasets = 2\nn_questions = 20\nrespondents_per_group = 60\nseed = 4\n";

#[test]
fn staged_pipeline_matches_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("synth.toml"), SMALL_SPEC).unwrap();
    let out = ok(d, &["synth", "--spec", "synth.toml", "--out", "world", "--case", "sharpen(2)"]);
    assert!(out.contains("synth-a: 20 questions"), "{out}");
    assert!(d.join("world/mock_provider.toml").exists());

    ok(d, &[
        "ingest",
        "--questions", "world/synth-a/questions.json",
        "--respondents", "world/synth-a/respondents.csv",
        "--out", "a/gold.json",
    ]);
    assert!(d.join("a/splits.json").exists());
    let out = ok(d, &[
        "elicit",
        "--gold", "a/gold.json",
        "--provider", "world/mock_provider.toml",
        "--method", "verbalized",
        "--prompt", "sd",
        "--cache", "cache",
        "--out", "a/elicited.jsonl",
    ]);
    assert!(out.contains(" 0 failed cells"), "{out}");
    let out = ok(d, &[
        "calibrate",
        "--elicited", "a/elicited.jsonl",
        "--gold", "a/gold.json",
        "--splits", "a/splits.json",
        "--min-supervision", "1,full",
        "--min-supervision-seeds", "2",
        "--out", "models",
    ]);
    assert!(out.contains("size"), "{out}");
    ok(d, &[
        "evaluate",
        "--models", "models",
        "--elicited", "a/elicited.jsonl",
        "--gold", "a/gold.json",
        "--splits", "a/splits.json",
        "--out", "rep",
    ]);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("rep/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n_settings"], 1);
    assert_eq!(summary["fraction_improved"], 1.0);

    ok(d, &["report", "--report", "rep/report.json", "--out", "rep2"]);
    for f in ["alignment.csv", "per_group.csv", "summary.json"] {
        assert_eq!(
            std::fs::read(d.join("rep").join(f)).unwrap(),
            std::fs::read(d.join("rep2").join(f)).unwrap(),
            "{f}"
        );
    }

    // a warm cache makes no provider calls
    let out = ok(d, &[
        "elicit",
        "--gold", "a/gold.json",
        "--provider", "world/mock_provider.toml",
        "--method", "verbalized",
        "--prompt", "sd",
        "--cache", "cache",
        "--out", "a/again.jsonl",
    ]);
    assert!(out.contains(" 0 provider calls"), "{out}");

    // research options travel from calibrate through evaluate into the summary
    ok(d, &[
        "calibrate",
        "--elicited", "a/elicited.jsonl",
        "--gold", "a/gold.json",
        "--splits", "a/splits.json",
        "--features", "probability-position",
        "--per-group-calibration",
        "--out", "models-research",
    ]);
    ok(d, &[
        "evaluate",
        "--models", "models-research",
        "--elicited", "a/elicited.jsonl",
        "--gold", "a/gold.json",
        "--splits", "a/splits.json",
        "--out", "rep-research",
    ]);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("rep-research/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["research_options"][0], "features=probability-position");
    assert_eq!(summary["research_options"][1], "per-group-calibration");
}

#[test]
fn run_with_config_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("synth.toml"), SMALL_SPEC).unwrap();
    ok(d, &["synth", "--spec", "synth.toml", "--out", "world"]);
    let config = r#"
methods = ["verbalized"]
kinds = ["sd"]

[[datasets]]
name = "synth-a"
questions = "world/synth-a/questions.json"
respondents = "world/synth-a/respondents.csv"

[[providers]]
kind = "mock"
model_id = "mock-sharp"
distortion = { gamma = 2.0, noise_scale = 0.05, seed = 1 }
"#;
    std::fs::write(d.join("exp.toml"), config).unwrap();
    let out = ok(d, &["run", "--config", "exp.toml", "--out", "res", "--seed", "9", "--workers", "2"]);
    assert!(out.contains("1 settings (0 failed cells)"), "{out}");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("res/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 9);
}

#[test]
fn bad_input_is_a_clean_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dist_align(dir.path(), &["run"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));

    let out = dist_align(dir.path(), &["synth", "--out", "w", "--case", "melt(3)"]);
    assert!(!out.status.success());

    std::fs::write(dir.path().join("bad.toml"), "n_questions = 0\n").unwrap();
    let out = dist_align(dir.path(), &["synth", "--spec", "bad.toml", "--out", "w"]);
    assert!(!out.status.success());
}
