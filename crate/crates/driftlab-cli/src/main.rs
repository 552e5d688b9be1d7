//! Command-line front end for the continual metric-learning lab.
//!
//! Three verbs: `run` executes one configuration over its seeds, `report`
//! aggregates results files into comparison tables, and `sweep` runs the
//! cartesian product of methods and translation modes before reporting.
//!
//! Configuration precedence, lowest to highest: built-in defaults, the
//! `--config` TOML file, `DRIFTLAB_<SECTION>_<KEY>` environment
//! variables, explicit flags. The process exit code is 0 on success or
//! the failure's category code otherwise.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use driftlab::error::{Error, Result};
use driftlab::experiment::{
    config_from_sources, env_overrides, run_experiment, summarize, ExperimentConfig, Method,
    RunRecord, ZstciMode,
};
use driftlab::report::{emit_report, read_results, write_report};

#[derive(Parser)]
#[command(name = "driftlab", version, about = "Continual metric-learning benchmark runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment configuration over its seeds.
    Run(RunArgs),
    /// Aggregate results files into method-comparison tables.
    Report(ReportArgs),
    /// Run methods x translation modes x seeds, then report.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Comma-separated master seeds, e.g. `1,2,3`.
    #[arg(long)]
    seeds: Option<String>,

    /// Number of tasks in the stream.
    #[arg(long)]
    tasks: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Output directory for results, snapshots and the summary.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Training method: ft, lwf, ewc or mas.
    #[arg(long)]
    method: Option<String>,

    /// Translation mode: off, zs-only, ur-only or full.
    #[arg(long)]
    zstci: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Results files (`results.jsonl`) or run directories containing one.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,

    /// Directory for report.txt, accuracy.csv and forgetting.csv.
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Root output directory; each combination gets a subdirectory.
    #[arg(long, default_value = "sweep")]
    out: PathBuf,

    /// Comma-separated methods to sweep (default: all four).
    #[arg(long)]
    method: Option<String>,

    /// Comma-separated translation modes to sweep (default: off,full).
    #[arg(long)]
    zstci: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Report(args) => cmd_report(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}

/// Builds the config from file, environment and flags, in that order.
fn load_config(args: &ConfigArgs, extra: &[(String, String)]) -> Result<ExperimentConfig> {
    let text = match &args.config {
        Some(path) => fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?,
        None => String::new(),
    };
    let mut overrides = env_overrides(std::env::vars());
    if let Some(seeds) = &args.seeds {
        overrides.push(("run.seeds".to_string(), format!("[{seeds}]")));
    }
    if let Some(tasks) = args.tasks {
        overrides.push(("stream.num_tasks".to_string(), tasks.to_string()));
    }
    overrides.extend_from_slice(extra);
    config_from_sources(&text, &overrides)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(m) = &args.method {
        Method::from_str(m)?;
        extra.push(("run.method".to_string(), m.clone()));
    }
    if let Some(z) = &args.zstci {
        ZstciMode::from_str(z)?;
        extra.push(("run.zstci".to_string(), z.clone()));
    }
    let cfg = load_config(&args.config, &extra)?.resolved()?;

    log::info!("running {} into {}", cfg.label(), args.out.display());
    let mut outcome = run_experiment(&cfg, &args.out)?;
    print!("{}", summarize(&cfg, &outcome.records));
    if outcome.failures.is_empty() {
        Ok(())
    } else {
        Err(outcome.failures.remove(0).1)
    }
}

fn results_path(input: &Path) -> PathBuf {
    if input.is_dir() {
        input.join("results.jsonl")
    } else {
        input.to_path_buf()
    }
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let mut records: Vec<RunRecord> = Vec::new();
    for input in &args.inputs {
        records.extend(read_results(&results_path(input))?);
    }
    let report = emit_report(&records)?;
    write_report(&report, &args.out)?;
    print!("{}", report.table);
    Ok(())
}

fn parse_list<T: FromStr<Err = Error>>(raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(T::from_str)
        .collect()
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let methods: Vec<Method> = match &args.method {
        Some(raw) => parse_list(raw)?,
        None => Method::all().to_vec(),
    };
    let modes: Vec<ZstciMode> = match &args.zstci {
        Some(raw) => parse_list(raw)?,
        None => vec![ZstciMode::Off, ZstciMode::Full],
    };
    if methods.is_empty() || modes.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one method and one zstci mode".to_string(),
        ));
    }

    let mut records: Vec<RunRecord> = Vec::new();
    let mut first_failure: Option<Error> = None;
    for &method in &methods {
        for &mode in &modes {
            let extra = vec![
                ("run.method".to_string(), method.name().to_string()),
                ("run.zstci".to_string(), mode.name().to_string()),
            ];
            let cfg = load_config(&args.config, &extra)?.resolved()?;
            let label = cfg.label();
            let dir = args.out.join(&label);
            log::info!("sweep: {label} into {}", dir.display());
            let outcome = run_experiment(&cfg, &dir)?;
            records.extend(outcome.records);
            if first_failure.is_none() {
                first_failure = outcome.failures.into_iter().map(|(_, e)| e).next();
            }
        }
    }

    let report = emit_report(&records)?;
    write_report(&report, &args.out)?;
    print!("{}", report.table);
    match first_failure {
        None => Ok(()),
        Some(e) => Err(e),
    }
}
