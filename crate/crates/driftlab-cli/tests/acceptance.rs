//! Determinism acceptance check for the binary: two invocations of
//! `run` with identical config and seed must produce byte-identical
//! result files, snapshots included.

use std::fs;
use std::path::Path;
use std::process::Command;

const CONFIG: &str = "\
[run]
method = \"lwf\"
zstci = \"full\"
seeds = [11, 12]

[stream]
num_tasks = 3
classes_per_task = 2
samples_per_class = 12
input_dim = 6
cluster_spread = 0.1

[embedding]
hidden_dims = [16]
embedding_dim = 8
epochs = 4

[transition]
epochs = 4
hidden_dim = 16
";

fn run_into(dir: &Path, out: &str) {
    let status = Command::new(env!("CARGO_BIN_EXE_driftlab"))
        .current_dir(dir)
        .args(["run", "--config", "exp.toml", "--out", out])
        .status()
        .expect("binary runs");
    assert!(status.success());
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                files.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));
    files
}

#[test]
fn criterion_7_byte_identical_result_files() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
    run_into(dir.path(), "first");
    run_into(dir.path(), "second");

    let first = tree_bytes(&dir.path().join("first"));
    let second = tree_bytes(&dir.path().join("second"));
    assert!(!first.is_empty());
    assert_eq!(
        first.iter().map(|(n, _)| n).collect::<Vec<_>>(),
        second.iter().map(|(n, _)| n).collect::<Vec<_>>(),
        "directory layout differs"
    );
    let mut pass = true;
    for ((name, a), (_, b)) in first.iter().zip(second.iter()) {
        if a != b {
            pass = false;
            eprintln!("criterion 7: {name} differs between invocations");
        }
    }
    println!(
        "criterion 7 (byte-identical run output): {}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}
