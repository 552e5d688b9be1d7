//! Aggregation of run records into method-comparison tables.
//!
//! A report covers one benchmark: every record must carry the same
//! stream spec, and records sharing a seed must have identical data
//! fingerprints, otherwise methods were measured on different data and
//! averaging them would be meaningless. Output is a fixed-width text
//! table plus two CSV series (accuracy and forgetting per task, mean
//! and sample standard deviation across seeds) meant for plotting.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};
use crate::experiment::{RunRecord, RunStatus};

/// Parses a `results.jsonl` file written by a run.
pub fn read_results(path: &Path) -> Result<Vec<RunRecord>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RunRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{} line {}: {e}", path.display(), i + 1))
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Per-label series statistics.
#[derive(Debug, Clone)]
pub struct LabelStats {
    pub label: String,
    pub seeds: usize,
    pub failed: usize,
    /// Mean and sample std of A_k per task.
    pub accuracy: Vec<(f64, f64)>,
    /// Mean and sample std of F_k per task.
    pub forgetting: Vec<(f64, f64)>,
}

/// The three report artifacts, as strings so callers and tests can
/// inspect them without touching the filesystem.
#[derive(Debug, Clone)]
pub struct Report {
    pub table: String,
    pub accuracy_csv: String,
    pub forgetting_csv: String,
    pub stats: Vec<LabelStats>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

fn check_consistency(records: &[RunRecord]) -> Result<()> {
    let spec = &records[0].stream_spec;
    for r in records {
        if &r.stream_spec != spec {
            return Err(Error::Aggregation(format!(
                "records mix stream specs: `{spec}` vs `{}`",
                r.stream_spec
            )));
        }
    }
    // Same (spec, seed) must mean same data regardless of method.
    let mut by_seed: BTreeMap<u64, &str> = BTreeMap::new();
    for r in records {
        if r.data_hash.is_empty() {
            continue;
        }
        match by_seed.get(&r.seed) {
            Some(h) if *h != r.data_hash => {
                return Err(Error::Aggregation(format!(
                    "seed {} has conflicting data fingerprints across records",
                    r.seed
                )));
            }
            Some(_) => {}
            None => {
                by_seed.insert(r.seed, &r.data_hash);
            }
        }
    }
    Ok(())
}

/// Aggregates records across seeds, grouped by label in first-seen
/// order. Failed records are counted but excluded from statistics.
pub fn emit_report(records: &[RunRecord]) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::Aggregation("no records to report".to_string()));
    }
    check_consistency(records)?;

    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.label.as_str()) {
            order.push(&r.label);
        }
    }

    let mut stats = Vec::new();
    for label in &order {
        let ok: Vec<&RunRecord> = records
            .iter()
            .filter(|r| r.label == *label && r.status == RunStatus::Ok)
            .collect();
        let failed = records
            .iter()
            .filter(|r| r.label == *label && r.status == RunStatus::Failed)
            .count();
        let tasks = ok.iter().map(|r| r.a_series.len()).max().unwrap_or(0);
        let mut accuracy = Vec::with_capacity(tasks);
        let mut forgetting = Vec::with_capacity(tasks);
        for k in 0..tasks {
            let a_k: Vec<f64> = ok.iter().filter_map(|r| r.a_series.get(k).copied()).collect();
            let f_k: Vec<f64> = ok.iter().filter_map(|r| r.f_series.get(k).copied()).collect();
            if a_k.is_empty() {
                break;
            }
            accuracy.push(mean_std(&a_k));
            forgetting.push(mean_std(&f_k));
        }
        stats.push(LabelStats {
            label: label.to_string(),
            seeds: ok.len(),
            failed,
            accuracy,
            forgetting,
        });
    }

    if stats.iter().all(|s| s.seeds == 0) {
        return Err(Error::Aggregation("no successful runs to report".to_string()));
    }

    let tasks = stats.iter().map(|s| s.accuracy.len()).max().unwrap_or(0);
    let mut table = String::new();
    table.push_str(&format!("stream {}\n", records[0].stream_spec));
    table.push_str(&format!("{:<12} {:>5}", "method", "seeds"));
    for k in 0..tasks {
        table.push_str(&format!("  {:>13}", format!("A_{}", k + 1)));
    }
    table.push('\n');
    for s in &stats {
        table.push_str(&format!("{:<12} {:>5}", s.label, s.seeds));
        for k in 0..tasks {
            match s.accuracy.get(k) {
                Some((m, sd)) => table.push_str(&format!("  {m:.4} ±{sd:.4}")),
                None => table.push_str(&format!("  {:>13}", "-")),
            }
        }
        if s.failed > 0 {
            table.push_str(&format!("  ({} failed)", s.failed));
        }
        table.push('\n');
    }

    let mut accuracy_csv = String::from("label,task,mean,std\n");
    let mut forgetting_csv = String::from("label,task,mean,std\n");
    for s in &stats {
        for (k, (m, sd)) in s.accuracy.iter().enumerate() {
            accuracy_csv.push_str(&format!("{},{},{m},{sd}\n", s.label, k + 1));
        }
        for (k, (m, sd)) in s.forgetting.iter().enumerate() {
            forgetting_csv.push_str(&format!("{},{},{m},{sd}\n", s.label, k + 1));
        }
    }

    Ok(Report {
        table,
        accuracy_csv,
        forgetting_csv,
        stats,
    })
}

/// Writes the three artifacts into `out_dir`.
pub fn write_report(report: &Report, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.txt"), &report.table)?;
    fs::write(out_dir.join("accuracy.csv"), &report.accuracy_csv)?;
    fs::write(out_dir.join("forgetting.csv"), &report.forgetting_csv)?;
    Ok(())
}
