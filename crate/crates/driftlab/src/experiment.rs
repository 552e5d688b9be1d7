//! Experiment configuration and the sequential training protocol.
//!
//! A run is fully described by an [`ExperimentConfig`] plus one master
//! seed. Per seed, the protocol is: train the embedding on each task in
//! order (with the chosen penalty from the second task on), stage that
//! task's prototypes, optionally train a translation pair and move the
//! memory into the new common space, estimate parameter importance for
//! the next task when the method needs it, snapshot state, and evaluate
//! the full history. Everything downstream of (config, seed) is
//! deterministic, and the files written by [`run_experiment`] are
//! byte-stable across invocations.
//!
//! Configs are TOML with one table per section. Unknown keys are
//! rejected so typos fail loudly instead of silently running defaults.
//! Overrides (CLI flags, `DRIFTLAB_*` environment variables) are merged
//! as dotted keys into the parsed document before validation.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::embedding::{train_task, EmbeddingModel, MiningPolicy, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_after_task, AccuracyMatrix};
use crate::hash::fnv1a;
use crate::regularizer::{estimate_fisher, estimate_mas, ImportanceMap, RegKind};
use crate::seeds::{rng, Stream};
use crate::snapshot::{save_importance, save_model, save_prototypes};
use crate::stream::{load_feature_csv, make_synthetic_stream, TaskStream};
use crate::tensor::Real;
use crate::translation::{
    compute_prototypes, train_transition, update_memory, PrototypeMemory, TransitionConfig,
    TranslationPair,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ft,
    Lwf,
    Ewc,
    Mas,
}

impl Method {
    pub fn all() -> [Method; 4] {
        [Method::Ft, Method::Lwf, Method::Ewc, Method::Mas]
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Ft => "ft",
            Method::Lwf => "lwf",
            Method::Ewc => "ewc",
            Method::Mas => "mas",
        }
    }

    pub fn reg_kind(self) -> RegKind {
        match self {
            Method::Ft => RegKind::None,
            Method::Lwf => RegKind::Lwf,
            Method::Ewc => RegKind::Ewc,
            Method::Mas => RegKind::Mas,
        }
    }

    /// Penalty weight used when the config leaves `gamma` unset. Scaled
    /// for the synthetic desk benchmark, and much smaller than the
    /// classic values: once the new task's hinges go quiet the penalty
    /// gradient is the only one left, and Adam's per-coordinate
    /// normalization turns any coherent gradient into full-size steps.
    /// Partial (rather than total) drift suppression therefore needs
    /// the penalty gradient near the minibatch noise floor.
    pub fn default_gamma(self) -> f64 {
        match self {
            Method::Ft => 0.0,
            Method::Lwf => 1e-4,
            Method::Ewc => 10.0,
            Method::Mas => 1e-6,
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ft" => Ok(Method::Ft),
            "lwf" => Ok(Method::Lwf),
            "ewc" => Ok(Method::Ewc),
            "mas" => Ok(Method::Mas),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected ft, lwf, ewc or mas)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZstciMode {
    /// No translation: prototypes stay in whatever space produced them.
    Off,
    /// Alignment terms only; the unified-representation triplets are
    /// dropped.
    ZsOnly,
    /// Unified-representation triplets only; no alignment anchor.
    UrOnly,
    Full,
}

impl ZstciMode {
    pub fn all() -> [ZstciMode; 4] {
        [
            ZstciMode::Off,
            ZstciMode::ZsOnly,
            ZstciMode::UrOnly,
            ZstciMode::Full,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            ZstciMode::Off => "off",
            ZstciMode::ZsOnly => "zs-only",
            ZstciMode::UrOnly => "ur-only",
            ZstciMode::Full => "full",
        }
    }

    /// Suffix appended to the method name in labels and reports.
    pub fn label_suffix(self) -> &'static str {
        match self {
            ZstciMode::Off => "",
            ZstciMode::ZsOnly => "+zs",
            ZstciMode::UrOnly => "+ur",
            ZstciMode::Full => "+zstci",
        }
    }
}

impl FromStr for ZstciMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(ZstciMode::Off),
            "zs-only" => Ok(ZstciMode::ZsOnly),
            "ur-only" => Ok(ZstciMode::UrOnly),
            "full" => Ok(ZstciMode::Full),
            other => Err(Error::Config(format!(
                "unknown zstci mode `{other}` (expected off, zs-only, ur-only or full)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MiningKind {
    /// Every valid (anchor, positive, negative) triple in the batch.
    All,
    /// One random positive and negative per anchor.
    Random,
}

impl MiningKind {
    pub fn policy(self) -> MiningPolicy {
        match self {
            MiningKind::All => MiningPolicy::AllValid,
            MiningKind::Random => MiningPolicy::RandomPerAnchor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub method: Method,
    pub zstci: ZstciMode,
    pub seeds: Vec<u64>,
    pub precision: Precision,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            method: Method::Ft,
            zstci: ZstciMode::Off,
            seeds: vec![1],
            precision: Precision::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSection {
    pub kind: StreamKind,
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub cluster_spread: f64,
    /// CSV feature file; required when `kind = "csv"`.
    pub path: Option<PathBuf>,
    pub has_header: bool,
}

impl Default for StreamSection {
    fn default() -> Self {
        StreamSection {
            kind: StreamKind::Synthetic,
            num_tasks: 5,
            classes_per_task: 4,
            samples_per_class: 50,
            input_dim: 16,
            cluster_spread: 0.15,
            path: None,
            has_header: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub normalize: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub margin: f64,
    pub mining: MiningKind,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        // Benchmark regime: a full-rank linear embedding keeps the
        // boundary-to-boundary drift exactly affine in embedding space
        // (the family the translation maps can represent), and the
        // high rate makes Adam walk the weights inside the current
        // task's null space, which is what scrambles old clusters.
        EmbeddingSection {
            hidden_dims: vec![],
            embedding_dim: 16,
            normalize: false,
            epochs: 40,
            batch_size: 32,
            lr: 0.05,
            margin: 0.3,
            mining: MiningKind::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerSection {
    /// Penalty weight; unset means the method's default.
    pub gamma: Option<f64>,
    /// Sum importance maps across tasks instead of re-estimating from
    /// scratch after each one.
    pub accumulate_importance: bool,
    pub importance_batches: usize,
    pub importance_batch_size: usize,
}

impl Default for RegularizerSection {
    fn default() -> Self {
        RegularizerSection {
            gamma: None,
            accumulate_importance: false,
            importance_batches: 8,
            importance_batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransitionSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden_dim: usize,
    pub gamma_tri: f64,
    pub beta: f64,
    pub delta: f64,
    pub align_weight: f64,
    pub margin: f64,
    pub chain_prototypes: bool,
    pub freeze_cur: bool,
    pub weight_decay: f64,
}

impl Default for TransitionSection {
    fn default() -> Self {
        // The per-boundary map can need large residual entries (the
        // exact correction for a drifted near-singular weight matrix),
        // so the schedule is long and hot enough for Adam to both reach
        // and settle them under the L1 align objective.
        TransitionSection {
            epochs: 400,
            batch_size: 32,
            lr: 0.05,
            hidden_dim: 0,
            gamma_tri: 1.0,
            beta: 0.1,
            delta: 0.1,
            align_weight: 1.0,
            margin: 0.3,
            chain_prototypes: true,
            freeze_cur: true,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub stream: StreamSection,
    pub embedding: EmbeddingSection,
    pub regularizer: RegularizerSection,
    pub transition: TransitionSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config error: {e}")))?;
        Ok(cfg)
    }

    /// Canonical TOML dump; two equal configs print identical bytes.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.run;
        if r.seeds.is_empty() {
            return Err(Error::Config("run.seeds must not be empty".to_string()));
        }
        let mut sorted = r.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != r.seeds.len() {
            return Err(Error::Config("run.seeds contains duplicates".to_string()));
        }

        let s = &self.stream;
        if s.num_tasks == 0 {
            return Err(Error::Config("stream.num_tasks must be at least 1".to_string()));
        }
        match s.kind {
            StreamKind::Synthetic => {
                if s.path.is_some() {
                    return Err(Error::Config(
                        "stream.path is only valid for csv streams".to_string(),
                    ));
                }
                if s.classes_per_task < 2 {
                    return Err(Error::Config(
                        "stream.classes_per_task must be at least 2".to_string(),
                    ));
                }
                if s.samples_per_class < 3 {
                    return Err(Error::Config(
                        "stream.samples_per_class must be at least 3".to_string(),
                    ));
                }
                if s.input_dim == 0 {
                    return Err(Error::Config("stream.input_dim must be at least 1".to_string()));
                }
                if !s.cluster_spread.is_finite() || s.cluster_spread < 0.0 {
                    return Err(Error::Config(
                        "stream.cluster_spread must be finite and non-negative".to_string(),
                    ));
                }
            }
            StreamKind::Csv => {
                if s.path.is_none() {
                    return Err(Error::Config(
                        "stream.path is required for csv streams".to_string(),
                    ));
                }
            }
        }

        let e = &self.embedding;
        if e.embedding_dim == 0 {
            return Err(Error::Config(
                "embedding.embedding_dim must be at least 1".to_string(),
            ));
        }
        if e.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(
                "embedding.hidden_dims entries must be at least 1".to_string(),
            ));
        }
        if e.batch_size == 0 {
            return Err(Error::Config("embedding.batch_size must be at least 1".to_string()));
        }
        if !(e.lr.is_finite() && e.lr > 0.0) {
            return Err(Error::Config("embedding.lr must be positive".to_string()));
        }
        if !(e.margin.is_finite() && e.margin > 0.0) {
            return Err(Error::Config("embedding.margin must be positive".to_string()));
        }

        let g = &self.regularizer;
        if let Some(gamma) = g.gamma {
            if !gamma.is_finite() || gamma < 0.0 {
                return Err(Error::Config(
                    "regularizer.gamma must be finite and non-negative".to_string(),
                ));
            }
        }
        if g.importance_batches == 0 || g.importance_batch_size == 0 {
            return Err(Error::Config(
                "regularizer importance batch settings must be at least 1".to_string(),
            ));
        }

        // The full-mode transition config exercises every weight check.
        transition_config(&self.transition, ZstciMode::Full).validate()?;
        Ok(())
    }

    /// Fills method-dependent defaults and validates. The returned
    /// config is what gets hashed, dumped for provenance and executed.
    pub fn resolved(&self) -> Result<ExperimentConfig> {
        let mut cfg = self.clone();
        if cfg.regularizer.gamma.is_none() {
            cfg.regularizer.gamma = Some(cfg.run.method.default_gamma());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Method plus ablation suffix, e.g. `lwf+zstci`.
    pub fn label(&self) -> String {
        format!("{}{}", self.run.method.name(), self.run.zstci.label_suffix())
    }

    /// FNV-1a digest of the canonical TOML dump.
    pub fn hash_hex(&self) -> String {
        format!("{:016x}", fnv1a(self.to_toml_string().as_bytes()))
    }

    /// Seed-independent description of the data source, used to refuse
    /// aggregating results from different benchmarks.
    pub fn stream_spec(&self) -> String {
        let s = &self.stream;
        match s.kind {
            StreamKind::Synthetic => format!(
                "synthetic tasks={} classes={} samples={} dim={} spread={}",
                s.num_tasks, s.classes_per_task, s.samples_per_class, s.input_dim, s.cluster_spread
            ),
            StreamKind::Csv => format!(
                "csv path={} tasks={} header={}",
                s.path.as_deref().unwrap_or(Path::new("?")).display(),
                s.num_tasks,
                s.has_header
            ),
        }
    }
}

/// Maps `DRIFTLAB_<SECTION>_<KEY>` environment variables to dotted
/// config keys. The first underscore after the prefix splits section
/// from key, so `DRIFTLAB_STREAM_NUM_TASKS` becomes `stream.num_tasks`.
/// Returned sorted for a deterministic application order.
pub fn env_overrides<I>(vars: I) -> Vec<(String, String)>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut out: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix("DRIFTLAB_")?;
            let (section, key) = rest.split_once('_')?;
            if section.is_empty() || key.is_empty() {
                return None;
            }
            Some((
                format!("{}.{}", section.to_lowercase(), key.to_lowercase()),
                v,
            ))
        })
        .collect();
    out.sort();
    out
}

/// Parses an override value as a TOML fragment, falling back to a bare
/// string so `method = lwf` does not need inner quotes.
fn parse_override_value(raw: &str) -> toml::Value {
    if let Ok(table) = format!("v = {raw}").parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

fn set_dotted(root: &mut toml::Table, dotted: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!(
            "override key `{dotted}` must look like section.key"
        )));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            Error::Config(format!("override key `{dotted}` descends into a non-table"))
        })?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_override_value(raw));
    Ok(())
}

/// Parses config text and merges dotted-key overrides (applied in
/// order, later entries win) before strict deserialization.
pub fn config_from_sources(text: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut root: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(format!("config error: {e}")))?;
    for (key, raw) in overrides {
        set_dotted(&mut root, key, raw)?;
    }
    toml::Value::Table(root)
        .try_into()
        .map_err(|e| Error::Config(format!("config error: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunStatus::Ok => "ok",
            RunStatus::Failed => "failed",
        })
    }
}

/// Wall-clock seconds per protocol phase of one task. Kept in memory
/// for logging but excluded from result files, which must be
/// byte-identical across invocations.
#[derive(Debug, Clone, Copy, Default)]
pub struct TaskTiming {
    pub train_s: f64,
    pub importance_s: f64,
    pub transition_s: f64,
    pub eval_s: f64,
}

/// One seed's outcome. Serialized as a single JSON line in
/// `results.jsonl`; on failure the matrix holds whatever rows finished
/// before the error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: String,
    pub label: String,
    pub seed: u64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub tasks: usize,
    pub stream_spec: String,
    /// Per-seed data fingerprint; empty when the stream never built.
    pub data_hash: String,
    pub matrix: AccuracyMatrix,
    pub a_series: Vec<f64>,
    pub f_series: Vec<f64>,
    #[serde(skip)]
    pub timings: Vec<TaskTiming>,
}

impl RunRecord {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.a_series.last().copied()
    }

    pub fn final_forgetting(&self) -> Option<f64> {
        self.f_series.last().copied()
    }
}

pub fn build_stream(cfg: &ExperimentConfig, seed: u64) -> Result<TaskStream> {
    let s = &cfg.stream;
    match s.kind {
        StreamKind::Synthetic => make_synthetic_stream(
            s.num_tasks,
            s.classes_per_task,
            s.samples_per_class,
            s.input_dim,
            s.cluster_spread,
            seed,
        ),
        StreamKind::Csv => {
            let path = s
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("stream.path is required for csv streams".to_string()))?;
            load_feature_csv(path, s.num_tasks, seed, s.has_header)
        }
    }
}

fn transition_config(s: &TransitionSection, mode: ZstciMode) -> TransitionConfig {
    let mut cfg = TransitionConfig {
        epochs: s.epochs,
        batch_size: s.batch_size,
        lr: s.lr,
        hidden_dim: s.hidden_dim,
        gamma_tri: s.gamma_tri,
        beta: s.beta,
        delta: s.delta,
        align_weight: s.align_weight,
        margin: s.margin,
        chain_prototypes: s.chain_prototypes,
        freeze_cur: s.freeze_cur,
        weight_decay: s.weight_decay,
    };
    match mode {
        ZstciMode::Off | ZstciMode::Full => {}
        ZstciMode::ZsOnly => {
            cfg.gamma_tri = 0.0;
            cfg.beta = 0.0;
            cfg.delta = 0.0;
        }
        ZstciMode::UrOnly => {
            cfg.align_weight = 0.0;
            // The ablation trains the unanchored pair. Freezing the
            // current side is an optimization of the align-based
            // transport; with it, zero-init residuals satisfy the
            // relative triplet terms almost immediately and the maps
            // never move, turning the ablation into the base method.
            cfg.freeze_cur = false;
        }
    }
    cfg
}

struct SeedRun<'a, T: Real> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    stream: &'a TaskStream,
    snap_dir: Option<&'a Path>,
    matrix: AccuracyMatrix,
    timings: Vec<TaskTiming>,
    model: Option<EmbeddingModel<T>>,
    memory: PrototypeMemory<T>,
    importance: Option<ImportanceMap<T>>,
}

impl<'a, T: Real> SeedRun<'a, T> {
    fn new(
        cfg: &'a ExperimentConfig,
        seed: u64,
        stream: &'a TaskStream,
        snap_dir: Option<&'a Path>,
    ) -> Self {
        SeedRun {
            cfg,
            seed,
            stream,
            snap_dir,
            matrix: AccuracyMatrix::new(),
            timings: Vec::new(),
            model: None,
            memory: PrototypeMemory::new(),
            importance: None,
        }
    }

    fn run_task(&mut self, t: usize) -> Result<()> {
        let cfg = self.cfg;
        let e = &cfg.embedding;
        let task = self.stream.task(t);
        let mut timing = TaskTiming::default();

        if self.model.is_none() {
            let mut dims = vec![self.stream.dim()];
            dims.extend(&e.hidden_dims);
            dims.push(e.embedding_dim);
            let mut init_rng = rng(self.seed, Stream::EmbedInit, 0);
            self.model = Some(EmbeddingModel::new(&dims, e.normalize, &mut init_rng)?);
        }

        let started = Instant::now();
        let prev = if t > 0 {
            Some(self.model.as_ref().expect("initialized").clone())
        } else {
            None
        };
        let train_cfg = TrainConfig {
            epochs: e.epochs,
            batch_size: e.batch_size,
            lr: e.lr,
            margin: e.margin,
            // The first task has no previous model to anchor to.
            regularizer: if t == 0 {
                RegKind::None
            } else {
                cfg.run.method.reg_kind()
            },
            gamma_reg: if t == 0 {
                0.0
            } else {
                cfg.regularizer.gamma.expect("config resolved")
            },
            mining: e.mining.policy(),
        };
        let model = self.model.as_mut().expect("initialized");
        train_task(
            model,
            task,
            &train_cfg,
            prev.as_ref(),
            self.importance.as_ref(),
            self.seed,
        )?;
        timing.train_s = started.elapsed().as_secs_f64();

        let started = Instant::now();
        let model = self.model.as_ref().expect("initialized");
        let new_protos = compute_prototypes(model, task)?;
        let mut pair: Option<TranslationPair<T>> = None;
        if cfg.run.zstci != ZstciMode::Off && t > 0 {
            let tc = transition_config(&cfg.transition, cfg.run.zstci);
            let p = train_transition(
                prev.as_ref().expect("t > 0"),
                model,
                task,
                &self.memory,
                &tc,
                self.seed,
                t as u64,
            )?;
            update_memory(
                &mut self.memory,
                &p,
                new_protos,
                t,
                cfg.transition.chain_prototypes,
            )?;
            pair = Some(p);
        } else {
            for (class, proto) in new_protos {
                self.memory.insert(class, proto, t)?;
            }
        }
        timing.transition_s = started.elapsed().as_secs_f64();

        // Importance for anchoring the *next* task, estimated on the
        // freshly trained model; skipped after the final task.
        let started = Instant::now();
        if t + 1 < self.stream.len() {
            let g = &cfg.regularizer;
            let estimated = match cfg.run.method.reg_kind() {
                RegKind::Ewc => Some(estimate_fisher(
                    model,
                    task,
                    g.importance_batches,
                    g.importance_batch_size,
                    e.margin,
                    self.seed,
                )?),
                RegKind::Mas => Some(estimate_mas(
                    model,
                    task,
                    g.importance_batches,
                    g.importance_batch_size,
                    self.seed,
                )?),
                _ => None,
            };
            if let Some(est) = estimated {
                self.importance = match (g.accumulate_importance, self.importance.take()) {
                    (true, Some(mut acc)) => {
                        acc.accumulate(&est)?;
                        Some(acc)
                    }
                    _ => Some(est),
                };
            }
        }
        timing.importance_s = started.elapsed().as_secs_f64();

        if let Some(dir) = self.snap_dir {
            save_model(&dir.join(format!("model-task{t}.snap")), model)?;
            save_prototypes(&dir.join(format!("prototypes-task{t}.snap")), &self.memory)?;
            if let Some(imp) = &self.importance {
                save_importance(&dir.join(format!("importance-task{t}.snap")), imp)?;
            }
        }

        let started = Instant::now();
        let row = evaluate_after_task(t, self.stream, model, pair.as_ref(), &self.memory)?;
        self.matrix.push_row(row)?;
        timing.eval_s = started.elapsed().as_secs_f64();
        self.timings.push(timing);
        Ok(())
    }
}

/// Executes one seed. Always yields a record; task-level failures are
/// recorded with the rows completed so far, and the error is returned
/// alongside for exit-code purposes.
pub fn run_seed<T: Real>(
    cfg: &ExperimentConfig,
    seed: u64,
    snap_dir: Option<&Path>,
) -> (RunRecord, Option<Error>) {
    let mut record = RunRecord {
        config: cfg.hash_hex(),
        label: cfg.label(),
        seed,
        status: RunStatus::Ok,
        error: None,
        tasks: cfg.stream.num_tasks,
        stream_spec: cfg.stream_spec(),
        data_hash: String::new(),
        matrix: AccuracyMatrix::new(),
        a_series: Vec::new(),
        f_series: Vec::new(),
        timings: Vec::new(),
    };

    let stream = match build_stream(cfg, seed) {
        Ok(s) => s,
        Err(e) => {
            record.status = RunStatus::Failed;
            record.error = Some(e.to_string());
            return (record, Some(e));
        }
    };
    record.data_hash = format!("{:016x}", stream.content_hash());

    let mut state = SeedRun::<T>::new(cfg, seed, &stream, snap_dir);
    let mut failure = None;
    for t in 0..stream.len() {
        if let Err(e) = state.run_task(t) {
            record.status = RunStatus::Failed;
            record.error = Some(format!("task {t}: {e}"));
            failure = Some(e);
            break;
        }
    }
    record.matrix = state.matrix;
    record.a_series = record.matrix.accuracy_series();
    record.f_series = record.matrix.forgetting_series();
    record.timings = state.timings;
    (record, failure)
}

/// Per-seed records plus the errors behind any failed ones.
pub struct ExperimentOutcome {
    pub records: Vec<RunRecord>,
    pub failures: Vec<(u64, Error)>,
}

impl ExperimentOutcome {
    pub fn all_ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Runs every configured seed and writes the run directory: the
/// resolved config for provenance, one JSON record per seed, per-task
/// snapshots, and a human-readable summary. Failed seeds are flushed
/// with a failure marker and do not stop later seeds.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    let cfg = cfg.resolved()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml_string())?;

    let results = File::create(out_dir.join("results.jsonl"))?;
    let mut results = BufWriter::new(results);
    let mut outcome = ExperimentOutcome {
        records: Vec::new(),
        failures: Vec::new(),
    };

    for &seed in &cfg.run.seeds {
        let snap_dir = out_dir.join("snapshots").join(format!("seed-{seed}"));
        fs::create_dir_all(&snap_dir)?;
        let (record, failure) = match cfg.run.precision {
            Precision::F64 => run_seed::<f64>(&cfg, seed, Some(&snap_dir)),
            Precision::F32 => run_seed::<f32>(&cfg, seed, Some(&snap_dir)),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Protocol(format!("cannot serialize run record: {e}")))?;
        writeln!(results, "{line}")?;
        results.flush()?;
        log_timings(&record);
        outcome.records.push(record);
        if let Some(e) = failure {
            outcome.failures.push((seed, e));
        }
    }

    fs::write(out_dir.join("summary.txt"), summarize(&cfg, &outcome.records))?;
    Ok(outcome)
}

fn log_timings(record: &RunRecord) {
    let total: f64 = record
        .timings
        .iter()
        .map(|t| t.train_s + t.importance_s + t.transition_s + t.eval_s)
        .sum();
    log::info!(
        "seed {} {}: {} tasks in {total:.2}s",
        record.seed,
        record.status,
        record.matrix.task_count(),
    );
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        var.sqrt()
    };
    (mean, std)
}

/// Human-readable per-seed table with final-task means. Deterministic
/// formatting: part of the byte-stable run directory.
pub fn summarize(cfg: &ExperimentConfig, records: &[RunRecord]) -> String {
    let mut out = String::new();
    out.push_str("driftlab run summary\n");
    out.push_str(&format!("label  {}\n", cfg.label()));
    out.push_str(&format!("config {}\n", cfg.hash_hex()));
    out.push_str(&format!("stream {}\n", cfg.stream_spec()));
    out.push('\n');
    out.push_str("seed      status  final-A  final-F\n");
    for r in records {
        let (a, f) = match (r.final_accuracy(), r.final_forgetting()) {
            (Some(a), Some(f)) if r.status == RunStatus::Ok => {
                (format!("{a:.4}"), format!("{f:.4}"))
            }
            _ => ("-".to_string(), "-".to_string()),
        };
        out.push_str(&format!("{:<9} {:<7} {:<8} {}\n", r.seed, r.status.to_string(), a, f));
    }
    let ok: Vec<&RunRecord> = records
        .iter()
        .filter(|r| r.status == RunStatus::Ok)
        .collect();
    out.push('\n');
    if ok.is_empty() {
        out.push_str("no successful seeds\n");
        return out;
    }
    let finals_a: Vec<f64> = ok.iter().filter_map(|r| r.final_accuracy()).collect();
    let finals_f: Vec<f64> = ok.iter().filter_map(|r| r.final_forgetting()).collect();
    let (ma, sa) = mean_std(&finals_a);
    let (mf, sf) = mean_std(&finals_f);
    out.push_str(&format!(
        "final-A mean {ma:.4} (std {sa:.4})  final-F mean {mf:.4} (std {sf:.4})\n"
    ));

    let tasks = ok[0].a_series.len();
    for k in 0..tasks {
        let a_k: Vec<f64> = ok.iter().filter_map(|r| r.a_series.get(k).copied()).collect();
        let f_k: Vec<f64> = ok.iter().filter_map(|r| r.f_series.get(k).copied()).collect();
        if a_k.len() != ok.len() || f_k.len() != ok.len() {
            continue;
        }
        let (ma, _) = mean_std(&a_k);
        let (mf, _) = mean_std(&f_k);
        out.push_str(&format!("task {k}: A {ma:.4}  F {mf:.4}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.run.seeds = vec![7];
        cfg.stream.num_tasks = 2;
        cfg.stream.classes_per_task = 2;
        cfg.stream.samples_per_class = 10;
        cfg.stream.input_dim = 4;
        cfg.stream.cluster_spread = 0.05;
        cfg.embedding.hidden_dims = vec![8];
        cfg.embedding.embedding_dim = 4;
        cfg.embedding.epochs = 3;
        cfg.transition.epochs = 3;
        cfg.transition.hidden_dim = 8;
        cfg
    }

    #[test]
    fn default_config_round_trips_and_validates() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        cfg.resolved().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_str("[embedding]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err:?}");
        let err = ExperimentConfig::from_toml_str("[optimizer]\nlr = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err:?}");
    }

    #[test]
    fn env_overrides_map_and_sort() {
        let vars = vec![
            ("DRIFTLAB_STREAM_NUM_TASKS".to_string(), "3".to_string()),
            ("DRIFTLAB_RUN_METHOD".to_string(), "lwf".to_string()),
            ("PATH".to_string(), "/bin".to_string()),
            ("DRIFTLAB_".to_string(), "x".to_string()),
        ];
        let over = env_overrides(vars);
        assert_eq!(
            over,
            vec![
                ("run.method".to_string(), "lwf".to_string()),
                ("stream.num_tasks".to_string(), "3".to_string()),
            ]
        );
    }

    #[test]
    fn overrides_merge_into_config_text() {
        let over = vec![
            ("run.method".to_string(), "ewc".to_string()),
            ("run.seeds".to_string(), "[3, 4]".to_string()),
            ("stream.cluster_spread".to_string(), "0.2".to_string()),
        ];
        let cfg = config_from_sources("[run]\nzstci = \"full\"\n", &over).unwrap();
        assert_eq!(cfg.run.method, Method::Ewc);
        assert_eq!(cfg.run.zstci, ZstciMode::Full);
        assert_eq!(cfg.run.seeds, vec![3, 4]);
        assert_eq!(cfg.stream.cluster_spread, 0.2);
    }

    #[test]
    fn override_with_unknown_key_is_rejected() {
        let over = vec![("run.mehtod".to_string(), "ewc".to_string())];
        assert!(matches!(
            config_from_sources("", &over).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn labels_combine_method_and_mode() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.label(), "ft");
        cfg.run.method = Method::Mas;
        cfg.run.zstci = ZstciMode::Full;
        assert_eq!(cfg.label(), "mas+zstci");
        cfg.run.zstci = ZstciMode::UrOnly;
        assert_eq!(cfg.label(), "mas+ur");
    }

    #[test]
    fn gamma_resolves_per_method_but_respects_explicit_values() {
        let mut cfg = ExperimentConfig::default();
        cfg.run.method = Method::Ewc;
        assert_eq!(
            cfg.resolved().unwrap().regularizer.gamma,
            Some(Method::Ewc.default_gamma())
        );
        cfg.regularizer.gamma = Some(0.5);
        assert_eq!(cfg.resolved().unwrap().regularizer.gamma, Some(0.5));
    }

    #[test]
    fn zs_only_mode_drops_triplet_terms() {
        let s = TransitionSection::default();
        let c = transition_config(&s, ZstciMode::ZsOnly);
        assert_eq!((c.gamma_tri, c.beta, c.delta), (0.0, 0.0, 0.0));
        assert!(c.align_weight > 0.0);
        let c = transition_config(&s, ZstciMode::UrOnly);
        assert_eq!(c.align_weight, 0.0);
        assert!(c.gamma_tri > 0.0);
    }

    #[test]
    fn seed_run_produces_triangular_record() {
        let cfg = tiny_config().resolved().unwrap();
        let (record, err) = run_seed::<f64>(&cfg, 7, None);
        assert!(err.is_none(), "{err:?}");
        assert_eq!(record.status, RunStatus::Ok);
        assert_eq!(record.matrix.task_count(), 2);
        assert_eq!(record.a_series.len(), 2);
        assert_eq!(record.f_series.len(), 2);
        assert_eq!(record.timings.len(), 2);
        assert!(!record.data_hash.is_empty());
    }

    #[test]
    fn identical_invocations_serialize_identically() {
        let cfg = tiny_config().resolved().unwrap();
        let (a, _) = run_seed::<f64>(&cfg, 7, None);
        let (b, _) = run_seed::<f64>(&cfg, 7, None);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn full_mode_with_zero_transition_epochs_matches_off_bitwise() {
        let mut off = tiny_config();
        off.run.method = Method::Lwf;
        let mut full = off.clone();
        full.run.zstci = ZstciMode::Full;
        full.transition.epochs = 0;
        let (off_rec, _) = run_seed::<f64>(&off.resolved().unwrap(), 7, None);
        let (full_rec, _) = run_seed::<f64>(&full.resolved().unwrap(), 7, None);
        assert_eq!(off_rec.status, RunStatus::Ok);
        assert_eq!(off_rec.matrix, full_rec.matrix);
    }

    #[test]
    fn f32_precision_runs() {
        let mut cfg = tiny_config();
        cfg.run.precision = Precision::F32;
        let cfg = cfg.resolved().unwrap();
        let (record, err) = run_seed::<f32>(&cfg, 7, None);
        assert!(err.is_none(), "{err:?}");
        assert_eq!(record.status, RunStatus::Ok);
    }

    #[test]
    fn missing_csv_yields_failure_marker() {
        let mut cfg = tiny_config();
        cfg.stream.kind = StreamKind::Csv;
        cfg.stream.path = Some(PathBuf::from("/nonexistent/features.csv"));
        let cfg = cfg.resolved().unwrap();
        let (record, err) = run_seed::<f64>(&cfg, 7, None);
        assert!(err.is_some());
        assert_eq!(record.status, RunStatus::Failed);
        assert!(record.error.is_some());
        assert_eq!(record.matrix.task_count(), 0);
        assert!(record.data_hash.is_empty());
    }

    #[test]
    fn methods_with_regularizers_run_end_to_end() {
        for method in [Method::Lwf, Method::Ewc, Method::Mas] {
            let mut cfg = tiny_config();
            cfg.run.method = method;
            cfg.run.zstci = ZstciMode::Full;
            let cfg = cfg.resolved().unwrap();
            let (record, err) = run_seed::<f64>(&cfg, 7, None);
            assert!(err.is_none(), "{method:?}: {err:?}");
            assert_eq!(record.status, RunStatus::Ok, "{method:?}");
        }
    }

    #[test]
    fn run_directories_are_byte_identical() {
        let cfg = tiny_config();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        run_experiment(&cfg, dir_a.path()).unwrap();
        run_experiment(&cfg, dir_b.path()).unwrap();
        for name in ["config.toml", "results.jsonl", "summary.txt"] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
        let snap = "snapshots/seed-7/model-task1.snap";
        let a = std::fs::read(dir_a.path().join(snap)).unwrap();
        let b = std::fs::read(dir_b.path().join(snap)).unwrap();
        assert_eq!(a, b, "snapshot differs");
    }

    #[test]
    fn summary_lists_seeds_and_means() {
        let cfg = tiny_config().resolved().unwrap();
        let (record, _) = run_seed::<f64>(&cfg, 7, None);
        let text = summarize(&cfg, &[record]);
        assert!(text.contains("seed"), "{text}");
        assert!(text.contains("final-A mean"), "{text}");
        assert!(text.contains("task 1:"), "{text}");
    }
}
