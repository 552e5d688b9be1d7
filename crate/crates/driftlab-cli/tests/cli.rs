//! End-to-end tests against the compiled binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn driftlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_driftlab"))
        .current_dir(dir)
        // Isolate from the ambient environment so host DRIFTLAB_* vars
        // cannot leak into test runs.
        .env_remove("DRIFTLAB_RUN_SEEDS")
        .env_remove("DRIFTLAB_STREAM_NUM_TASKS")
        .args(args)
        .output()
        .expect("binary runs")
}

const TINY: &str = "\
[run]
seeds = [1]

[stream]
num_tasks = 2
classes_per_task = 2
samples_per_class = 10
input_dim = 4
cluster_spread = 0.05

[embedding]
hidden_dims = [8]
embedding_dim = 4
epochs = 3

[transition]
epochs = 3
hidden_dim = 8
";

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn run_writes_results_and_summary() {
    let dir = setup();
    let out = driftlab(dir.path(), &["run", "--config", "tiny.toml", "--out", "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("final-A mean"), "{stdout}");
    for name in ["config.toml", "results.jsonl", "summary.txt"] {
        assert!(dir.path().join("run").join(name).exists(), "{name} missing");
    }
    assert!(dir
        .path()
        .join("run/snapshots/seed-1/model-task0.snap")
        .exists());
}

#[test]
fn results_record_has_expected_fields() {
    let dir = setup();
    let out = driftlab(
        dir.path(),
        &["run", "--config", "tiny.toml", "--out", "run", "--method", "lwf"],
    );
    assert!(out.status.success());
    let line = fs::read_to_string(dir.path().join("run/results.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    assert_eq!(v["label"], "lwf");
    assert_eq!(v["seed"], 1);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["tasks"], 2);
    assert_eq!(v["a_series"].as_array().unwrap().len(), 2);
    assert!(v.get("timings").is_none(), "timings must stay out of files");
}

#[test]
fn method_flag_overrides_config() {
    let dir = setup();
    let out = driftlab(
        dir.path(),
        &["run", "--config", "tiny.toml", "--out", "run", "--method", "ewc", "--zstci", "full"],
    );
    assert!(out.status.success());
    let line = fs::read_to_string(dir.path().join("run/results.jsonl")).unwrap();
    assert!(line.contains("\"label\":\"ewc+zstci\""), "{line}");
}

#[test]
fn env_variable_overrides_config() {
    let dir = setup();
    let out = Command::new(env!("CARGO_BIN_EXE_driftlab"))
        .current_dir(dir.path())
        .env("DRIFTLAB_STREAM_NUM_TASKS", "3")
        .args(["run", "--config", "tiny.toml", "--out", "run"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let line = fs::read_to_string(dir.path().join("run/results.jsonl")).unwrap();
    assert!(line.contains("\"tasks\":3"), "{line}");
}

#[test]
fn flag_beats_environment() {
    let dir = setup();
    let out = Command::new(env!("CARGO_BIN_EXE_driftlab"))
        .current_dir(dir.path())
        .env("DRIFTLAB_STREAM_NUM_TASKS", "3")
        .args(["run", "--config", "tiny.toml", "--out", "run", "--tasks", "2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let line = fs::read_to_string(dir.path().join("run/results.jsonl")).unwrap();
    assert!(line.contains("\"tasks\":2"), "{line}");
}

#[test]
fn bad_method_exits_with_config_code() {
    let dir = setup();
    let out = driftlab(
        dir.path(),
        &["run", "--config", "tiny.toml", "--out", "run", "--method", "sgd"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown method"));
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = setup();
    fs::write(dir.path().join("bad.toml"), "[embedding]\nlearning_rate = 0.1\n").unwrap();
    let out = driftlab(dir.path(), &["run", "--config", "bad.toml", "--out", "run"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_csv_data_exits_with_data_code() {
    let dir = setup();
    fs::write(
        dir.path().join("csv.toml"),
        "[stream]\nkind = \"csv\"\npath = \"missing.csv\"\nnum_tasks = 2\n",
    )
    .unwrap();
    let out = driftlab(dir.path(), &["run", "--config", "csv.toml", "--out", "run"]);
    assert_eq!(out.status.code(), Some(3));
    // The failed seed is still flushed with a marker.
    let line = fs::read_to_string(dir.path().join("run/results.jsonl")).unwrap();
    assert!(line.contains("\"status\":\"failed\""), "{line}");
}

#[test]
fn report_merges_runs_and_writes_tables() {
    let dir = setup();
    assert!(driftlab(dir.path(), &["run", "--config", "tiny.toml", "--out", "a"])
        .status
        .success());
    assert!(driftlab(
        dir.path(),
        &["run", "--config", "tiny.toml", "--out", "b", "--method", "lwf"],
    )
    .status
    .success());
    let out = driftlab(dir.path(), &["report", "a", "b", "--out", "rep"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("ft"), "{table}");
    assert!(table.contains("lwf"), "{table}");
    for name in ["report.txt", "accuracy.csv", "forgetting.csv"] {
        assert!(dir.path().join("rep").join(name).exists(), "{name} missing");
    }
}

#[test]
fn sweep_covers_selected_combinations() {
    let dir = setup();
    let out = driftlab(
        dir.path(),
        &[
            "sweep",
            "--config",
            "tiny.toml",
            "--out",
            "sw",
            "--method",
            "ft,lwf",
            "--zstci",
            "off,full",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for label in ["ft", "ft+zstci", "lwf", "lwf+zstci"] {
        assert!(
            dir.path().join("sw").join(label).join("results.jsonl").exists(),
            "{label} missing"
        );
    }
    assert!(dir.path().join("sw/report.txt").exists());
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("lwf+zstci"), "{table}");
}
