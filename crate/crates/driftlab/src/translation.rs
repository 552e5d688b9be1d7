//! Residual translation across a task boundary, plus prototype memory.
//!
//! When training moves from task t-1 to task t the embedding space
//! drifts, and prototypes stored under the old parameters stop being
//! comparable with fresh embeddings. At each boundary a pair of residual
//! maps `v + g_old(v)` / `v + g_cur(v)` is trained on current-task data
//! only, pulling both spaces into one common space:
//!
//! - an align term, the mean L1 gap between the two translated views of
//!   the same inputs;
//! - three hinge terms keeping the common space discriminative, anchored
//!   at translated current features, translated old-model features, and
//!   translated old prototypes (the last uses the anchor itself as the
//!   positive, pushing current features at least a margin away).
//!
//! Both maps start with a zero output layer, so an untrained pair is the
//! exact identity and a zero-epoch transition changes nothing.

use std::collections::BTreeMap;

use rand_chacha::rand_core::RngCore;

use crate::embedding::EmbeddingModel;
use crate::error::{Error, Result};
use crate::graph::{grad, Graph, NodeId};
use crate::net::{Activation, Init, MlpNet};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::seeds::{rng, Stream};
use crate::stream::{Sample, TaskDataset};
use crate::tensor::{Real, Tensor};

/// One stored prototype.
#[derive(Debug, Clone)]
pub struct ProtoEntry<T: Real> {
    /// Vector in the current common space; what classification sees.
    pub value: Tensor<T>,
    /// Mean as computed at the origin task, never touched afterwards.
    /// Kept for the non-chained update variant.
    pub raw: Tensor<T>,
    pub origin_task: usize,
}

/// Class id -> prototype, exactly one entry per seen class.
#[derive(Debug, Clone, Default)]
pub struct PrototypeMemory<T: Real> {
    entries: BTreeMap<usize, ProtoEntry<T>>,
    log: Vec<usize>,
}

impl<T: Real> PrototypeMemory<T> {
    pub fn new() -> Self {
        PrototypeMemory {
            entries: BTreeMap::new(),
            log: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.values().next().map(|e| e.value.len())
    }

    /// Class ids in ascending order.
    pub fn classes(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    /// Classes in the order they were first inserted.
    pub fn insertion_log(&self) -> &[usize] {
        &self.log
    }

    pub fn get(&self, class: usize) -> Option<&ProtoEntry<T>> {
        self.entries.get(&class)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &ProtoEntry<T>)> {
        self.entries.iter().map(|(&c, e)| (c, e))
    }

    /// Inserts a brand-new class prototype (identity-translated).
    pub fn insert(&mut self, class: usize, vector: Tensor<T>, origin_task: usize) -> Result<()> {
        if self.entries.contains_key(&class) {
            return Err(Error::Protocol(format!(
                "class {class} already has a prototype"
            )));
        }
        vector.check_finite("prototype")?;
        if let Some(d) = self.dim() {
            if vector.len() != d {
                return Err(Error::shape(
                    "prototype_insert",
                    format!("vector has dim {}, memory holds dim {d}", vector.len()),
                ));
            }
        }
        self.entries.insert(
            class,
            ProtoEntry {
                raw: vector.clone(),
                value: vector,
                origin_task,
            },
        );
        self.log.push(class);
        Ok(())
    }

    /// Rebuilds a memory from serialized entries plus the insertion log.
    pub fn restore(entries: Vec<(usize, ProtoEntry<T>)>, log: Vec<usize>) -> Result<Self> {
        let mut mem = PrototypeMemory::new();
        for (class, entry) in entries {
            if mem.entries.contains_key(&class) {
                return Err(Error::Snapshot(format!("class {class} appears twice")));
            }
            entry.value.check_finite("prototype")?;
            entry.raw.check_finite("prototype")?;
            if let Some(d) = mem.dim() {
                if entry.value.len() != d || entry.raw.len() != d {
                    return Err(Error::Snapshot(format!(
                        "class {class} vectors disagree with memory dim {d}"
                    )));
                }
            }
            mem.entries.insert(class, entry);
        }
        let mut logged: Vec<usize> = log.clone();
        logged.sort_unstable();
        if logged != mem.classes() {
            return Err(Error::Snapshot(
                "insertion log is not a permutation of the stored classes".to_string(),
            ));
        }
        mem.log = log;
        Ok(mem)
    }

    /// Current common-space vectors stacked as rows, classes ascending.
    pub fn stacked_values(&self) -> Result<(Vec<usize>, Tensor<T>)> {
        if self.is_empty() {
            return Err(Error::Protocol("prototype memory is empty".to_string()));
        }
        let classes = self.classes();
        let dim = self.dim().expect("non-empty");
        let mut data = Vec::with_capacity(classes.len() * dim);
        for c in &classes {
            data.extend_from_slice(self.entries[c].value.data());
        }
        Ok((classes, Tensor::from_vec(&[self.entries.len(), dim], data)?))
    }

    pub fn cast<U: Real>(&self) -> PrototypeMemory<U> {
        PrototypeMemory {
            entries: self
                .entries
                .iter()
                .map(|(&c, e)| {
                    (
                        c,
                        ProtoEntry {
                            value: e.value.cast(),
                            raw: e.raw.cast(),
                            origin_task: e.origin_task,
                        },
                    )
                })
                .collect(),
            log: self.log.clone(),
        }
    }
}

/// The two residual maps trained at one task boundary.
#[derive(Debug, Clone)]
pub struct TranslationPair<T: Real> {
    g_old: MlpNet<T>,
    g_cur: MlpNet<T>,
}

impl<T: Real> TranslationPair<T> {
    /// Fresh pair: `embed_dim -> hidden_dim -> embed_dim` ReLU nets with
    /// zero output layers, i.e. both maps start as the identity.
    ///
    /// `hidden_dim = 0` builds single affine layers instead. Linear
    /// residual maps extrapolate a rigid-ish drift to regions the
    /// current task does not cover, which is exactly where stored
    /// prototypes live; the extra capacity of a hidden layer tends to
    /// fit the covered region and corrupt the rest.
    pub fn new(
        embed_dim: usize,
        hidden_dim: usize,
        master_seed: u64,
        transition_id: u64,
    ) -> Result<Self> {
        let mut r = rng(master_seed, Stream::TransitionInit, transition_id);
        let dims: Vec<usize> = if hidden_dim == 0 {
            vec![embed_dim, embed_dim]
        } else {
            vec![embed_dim, hidden_dim, embed_dim]
        };
        let mut g_old = MlpNet::new(&dims, Activation::Relu, Init::He, &mut r)?;
        let mut g_cur = MlpNet::new(&dims, Activation::Relu, Init::He, &mut r)?;
        g_old.zero_output_layer();
        g_cur.zero_output_layer();
        Ok(TranslationPair { g_old, g_cur })
    }

    pub fn from_nets(g_old: MlpNet<T>, g_cur: MlpNet<T>) -> Result<Self> {
        if g_old.input_dim() != g_old.output_dim()
            || !g_old.params().same_layout(g_cur.params())
        {
            return Err(Error::Protocol(
                "translation maps must be square and architecturally identical".to_string(),
            ));
        }
        Ok(TranslationPair { g_old, g_cur })
    }

    pub fn g_old(&self) -> &MlpNet<T> {
        &self.g_old
    }

    pub fn g_cur(&self) -> &MlpNet<T> {
        &self.g_cur
    }

    pub fn embed_dim(&self) -> usize {
        self.g_old.input_dim()
    }

    /// Old-side map applied to stored or old-model vectors.
    pub fn translate_old(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        translate(&self.g_old, v)
    }

    /// Current-side map applied to fresh embeddings.
    pub fn translate_cur(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        translate(&self.g_cur, v)
    }

    pub fn cast<U: Real>(&self) -> TranslationPair<U> {
        TranslationPair {
            g_old: self.g_old.cast(),
            g_cur: self.g_cur.cast(),
        }
    }
}

/// Residual application `v + g(v)`; accepts a vector or a batch and
/// preserves the input rank.
pub fn translate<T: Real>(g: &MlpNet<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let correction = g.forward(v)?;
    let out = v.as_batch().add(&correction)?;
    if v.shape().len() == 1 {
        Tensor::from_vec(&[v.len()], out.data().to_vec())
    } else {
        Ok(out)
    }
}

/// Per-class means of embedded train samples, classes ascending.
/// Means are plain averages; they are not re-normalized even when the
/// model normalizes its outputs.
pub fn compute_prototypes<T: Real>(
    model: &EmbeddingModel<T>,
    task: &TaskDataset,
) -> Result<Vec<(usize, Tensor<T>)>> {
    let mut out = Vec::with_capacity(task.class_count());
    for &c in task.classes() {
        let members: Vec<&Sample> = task.train().iter().filter(|s| s.label == c).collect();
        if members.is_empty() {
            return Err(Error::Data(format!("class {c} has no train samples")));
        }
        let z = model.embed_samples(&members)?;
        let dim = z.cols();
        let scale = T::from_f64(1.0 / z.rows() as f64);
        let mut mean = vec![T::zero(); dim];
        for i in 0..z.rows() {
            for (m, &v) in mean.iter_mut().zip(z.row(i).iter()) {
                *m += v * scale;
            }
        }
        out.push((c, Tensor::from_vec(&[dim], mean)?));
    }
    Ok(out)
}

/// Settings for one boundary transition.
#[derive(Debug, Clone)]
pub struct TransitionConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Hidden width of the residual maps; 0 means single affine layers.
    pub hidden_dim: usize,
    /// Weight on the current-feature anchor term.
    pub gamma_tri: f64,
    /// Weight on the old-feature anchor term.
    pub beta: f64,
    /// Weight on the prototype anchor term.
    pub delta: f64,
    /// Weight on the align term; 0 drops alignment entirely.
    pub align_weight: f64,
    pub margin: f64,
    /// Chained prototype updates: translate the stored common-space
    /// value (default). When off, the latest old-side map is applied to
    /// the raw origin-task mean instead, discarding earlier corrections.
    pub chain_prototypes: bool,
    /// Keep the current-side map at its identity init, collapsing the
    /// common space onto the current embedding space. Stored prototypes
    /// then sit exactly in the space the next boundary's old-side map is
    /// trained on, so chained updates stay consistent over many
    /// boundaries instead of compounding the current-side correction.
    pub freeze_cur: bool,
    /// Decoupled decay on the maps' weight matrices (biases exempt).
    /// The training batches only constrain the maps on the current
    /// task's clusters; decay shrinks the unconstrained directions back
    /// toward zero correction, so stored prototypes outside that support
    /// fall back to identity instead of picking up fitted noise.
    pub weight_decay: f64,
}

impl TransitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(
                "transition batch_size must be at least 1".to_string(),
            ));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!(
                "transition margin must be positive, got {}",
                self.margin
            )));
        }
        for (name, w) in [
            ("gamma_tri", self.gamma_tri),
            ("beta", self.beta),
            ("delta", self.delta),
            ("align_weight", self.align_weight),
            ("weight_decay", self.weight_decay),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {w}"
                )));
            }
        }
        Ok(())
    }

    fn triplet_terms_active(&self) -> bool {
        self.gamma_tri > 0.0 || self.beta > 0.0 || self.delta > 0.0
    }

    fn any_term_active(&self) -> bool {
        self.align_weight > 0.0 || self.triplet_terms_active()
    }
}

/// Mean L1 gap between the two translated views of one batch.
pub fn align_loss<T: Real>(
    old_feats: &Tensor<T>,
    cur_feats: &Tensor<T>,
    pair: &TranslationPair<T>,
) -> Result<T> {
    if old_feats.shape() != cur_feats.shape() {
        return Err(Error::Protocol(format!(
            "align batches differ in shape: {:?} vs {:?}",
            old_feats.shape(),
            cur_feats.shape()
        )));
    }
    let m_tilde = pair.translate_old(&old_feats.as_batch())?;
    let m = pair.translate_cur(&cur_feats.as_batch())?;
    let n = T::from_f64(m.rows() as f64);
    let mut acc = T::zero();
    for (&a, &b) in m_tilde.data().iter().zip(m.data().iter()) {
        acc += (a - b).abs();
    }
    Ok(acc / n)
}

/// Concrete triplet assignments for one transition batch; drawn up
/// front so the loss itself is deterministic and differentiable.
#[derive(Debug, Clone, Default)]
pub struct TransitionTripletPlan {
    /// (anchor, positive, prototype-negative) over current-side features.
    pub cur_anchored: Vec<(usize, usize, usize)>,
    /// Same index triples over old-side features.
    pub old_anchored: Vec<(usize, usize, usize)>,
    /// (prototype-anchor, batch-negative); the anchor doubles as its own
    /// positive, so only the negative distance enters the hinge.
    pub proto_anchored: Vec<(usize, usize)>,
}

/// Enumerates every same-label (anchor, positive) pair and assigns each
/// a uniformly random old prototype as negative; every prototype then
/// gets one uniformly random batch feature as its negative.
pub fn plan_transition_triplets(
    labels: &[usize],
    proto_count: usize,
    rng: &mut impl RngCore,
) -> Result<TransitionTripletPlan> {
    if proto_count == 0 {
        return Err(Error::Protocol(
            "no old prototypes exist; the first task has no transition".to_string(),
        ));
    }
    let n = labels.len();
    let mut pairs = Vec::new();
    for a in 0..n {
        for p in 0..n {
            if p != a && labels[p] == labels[a] {
                pairs.push((a, p));
            }
        }
    }
    let mut draw = |bound: usize| (rng.next_u64() % bound as u64) as usize;
    let cur_anchored: Vec<(usize, usize, usize)> = pairs
        .iter()
        .map(|&(a, p)| (a, p, draw(proto_count)))
        .collect();
    let old_anchored: Vec<(usize, usize, usize)> = pairs
        .iter()
        .map(|&(a, p)| (a, p, draw(proto_count)))
        .collect();
    let proto_anchored: Vec<(usize, usize)> =
        (0..proto_count).map(|u| (u, draw(n))).collect();
    Ok(TransitionTripletPlan {
        cur_anchored,
        old_anchored,
        proto_anchored,
    })
}

fn planned_term<T: Real>(
    graph: &mut Graph<'_, T>,
    feats: NodeId,
    protos: NodeId,
    triples: &[(usize, usize, usize)],
    margin: f64,
) -> Result<Option<NodeId>> {
    if triples.is_empty() {
        return Ok(None);
    }
    let anchors: Vec<usize> = triples.iter().map(|t| t.0).collect();
    let positives: Vec<usize> = triples.iter().map(|t| t.1).collect();
    let negatives: Vec<usize> = triples.iter().map(|t| t.2).collect();
    let a = graph.gather_rows(feats, anchors)?;
    let p = graph.gather_rows(feats, positives)?;
    let u = graph.gather_rows(protos, negatives)?;
    let dp = graph.sub(a, p)?;
    let dp = graph.square(dp)?;
    let d_pos = graph.sum_rows(dp)?;
    let dn = graph.sub(a, u)?;
    let dn = graph.square(dn)?;
    let d_neg = graph.sum_rows(dn)?;
    let gap = graph.sub(d_pos, d_neg)?;
    let shifted = graph.offset(gap, margin)?;
    let hinged = graph.hinge(shifted)?;
    Ok(Some(graph.mean_all(hinged)?))
}

fn proto_anchor_term<T: Real>(
    graph: &mut Graph<'_, T>,
    feats: NodeId,
    protos: NodeId,
    pairs: &[(usize, usize)],
    margin: f64,
) -> Result<Option<NodeId>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let anchors: Vec<usize> = pairs.iter().map(|t| t.0).collect();
    let negatives: Vec<usize> = pairs.iter().map(|t| t.1).collect();
    let u = graph.gather_rows(protos, anchors)?;
    let f = graph.gather_rows(feats, negatives)?;
    let d = graph.sub(u, f)?;
    let d = graph.square(d)?;
    let d_neg = graph.sum_rows(d)?;
    // Anchor is its own positive: hinge(margin - d_neg).
    let neg = graph.scale(d_neg, -1.0)?;
    let shifted = graph.offset(neg, margin)?;
    let hinged = graph.hinge(shifted)?;
    Ok(Some(graph.mean_all(hinged)?))
}

fn add_weighted<T: Real>(
    graph: &mut Graph<'_, T>,
    total: Option<NodeId>,
    term: Option<NodeId>,
    weight: f64,
) -> Result<Option<NodeId>> {
    let Some(term) = term else { return Ok(total) };
    if weight == 0.0 {
        return Ok(total);
    }
    let scaled = graph.scale(term, weight)?;
    Ok(Some(match total {
        Some(t) => graph.add(t, scaled)?,
        None => scaled,
    }))
}

/// Builds the full transition loss on a graph whose parameter set merges
/// the pair under the `old.`/`cur.` prefixes. Feature batches and stored
/// prototypes enter as constants; gradients reach only the two maps.
pub fn build_transition_loss<T: Real>(
    graph: &mut Graph<'_, T>,
    pair: &TranslationPair<T>,
    z_old: Tensor<T>,
    z_cur: Tensor<T>,
    proto_values: Tensor<T>,
    plan: Option<&TransitionTripletPlan>,
    cfg: &TransitionConfig,
) -> Result<NodeId> {
    if z_old.shape() != z_cur.shape() {
        return Err(Error::Protocol(format!(
            "align batches differ in shape: {:?} vs {:?}",
            z_old.shape(),
            z_cur.shape()
        )));
    }
    let x_old = graph.constant(z_old)?;
    let x_cur = graph.constant(z_cur)?;
    let d_old = pair.g_old().forward_on(graph, x_old, "old.")?;
    let m_tilde = graph.add(x_old, d_old)?;
    let d_cur = pair.g_cur().forward_on(graph, x_cur, "cur.")?;
    let m = graph.add(x_cur, d_cur)?;

    let mut total: Option<NodeId> = None;
    if cfg.align_weight > 0.0 {
        let diff = graph.sub(m_tilde, m)?;
        let l1 = graph.abs(diff)?;
        let rows = graph.sum_rows(l1)?;
        let align = graph.mean_all(rows)?;
        total = add_weighted(graph, total, Some(align), cfg.align_weight)?;
    }
    if cfg.triplet_terms_active() {
        let plan = plan.ok_or_else(|| {
            Error::Protocol("triplet terms are weighted but no plan was drawn".to_string())
        })?;
        let p0 = graph.constant(proto_values)?;
        let du = pair.g_old().forward_on(graph, p0, "old.")?;
        let u = graph.add(p0, du)?;
        let t_cur = planned_term(graph, m, u, &plan.cur_anchored, cfg.margin)?;
        total = add_weighted(graph, total, t_cur, cfg.gamma_tri)?;
        let t_old = planned_term(graph, m_tilde, u, &plan.old_anchored, cfg.margin)?;
        total = add_weighted(graph, total, t_old, cfg.beta)?;
        let t_proto = proto_anchor_term(graph, m, u, &plan.proto_anchored, cfg.margin)?;
        total = add_weighted(graph, total, t_proto, cfg.delta)?;
    }
    match total {
        Some(t) => Ok(t),
        None => graph.constant(Tensor::scalar(T::zero())),
    }
}

/// Value form of the three hinge terms over already-translated inputs;
/// the independent-oracle counterpart of the graph construction.
pub fn unified_triplet_loss<T: Real>(
    m: &Tensor<T>,
    m_tilde: &Tensor<T>,
    translated_protos: &Tensor<T>,
    plan: &TransitionTripletPlan,
    cfg: &TransitionConfig,
) -> Result<T> {
    if translated_protos.rows() == 0 {
        return Err(Error::Protocol(
            "no old prototypes exist; the first task has no transition".to_string(),
        ));
    }
    let margin = T::from_f64(cfg.margin);
    let hinge_mean = |triples: &[(usize, usize, usize)], feats: &Tensor<T>| -> T {
        if triples.is_empty() {
            return T::zero();
        }
        let mut acc = T::zero();
        for &(a, p, u) in triples {
            let d_pos = Tensor::sq_dist(feats.row(a), feats.row(p));
            let d_neg = Tensor::sq_dist(feats.row(a), translated_protos.row(u));
            let viol = d_pos - d_neg + margin;
            if viol > T::zero() {
                acc += viol;
            }
        }
        acc / T::from_f64(triples.len() as f64)
    };
    let mut total = T::zero();
    total += T::from_f64(cfg.gamma_tri) * hinge_mean(&plan.cur_anchored, m);
    total += T::from_f64(cfg.beta) * hinge_mean(&plan.old_anchored, m_tilde);
    if !plan.proto_anchored.is_empty() {
        let mut acc = T::zero();
        for &(u, f) in &plan.proto_anchored {
            let d_neg = Tensor::sq_dist(translated_protos.row(u), m.row(f));
            let viol = margin - d_neg;
            if viol > T::zero() {
                acc += viol;
            }
        }
        total += T::from_f64(cfg.delta) * (acc / T::from_f64(plan.proto_anchored.len() as f64));
    }
    Ok(total)
}

/// Merged parameter set of a pair, the optimization target during a
/// transition. `old.`/`cur.` prefixes separate the two maps.
pub fn merged_pair_params<T: Real>(pair: &TranslationPair<T>) -> Result<ParamSet<T>> {
    ParamSet::merged(&[("old.", pair.g_old().params()), ("cur.", pair.g_cur().params())])
}

/// Trains a fresh pair at the boundary into task `task`.
///
/// Both embedding models stay frozen; only the two residual maps learn.
/// The boundary ordinal `transition_id` (1 for the transition into the
/// second task) seeds init, batching and prototype sampling.
pub fn train_transition<T: Real>(
    prev_model: &EmbeddingModel<T>,
    cur_model: &EmbeddingModel<T>,
    task: &TaskDataset,
    memory: &PrototypeMemory<T>,
    cfg: &TransitionConfig,
    master_seed: u64,
    transition_id: u64,
) -> Result<TranslationPair<T>> {
    cfg.validate()?;
    if memory.is_empty() {
        return Err(Error::Protocol(
            "no old prototypes exist; the first task has no transition".to_string(),
        ));
    }
    if prev_model.embed_dim() != cur_model.embed_dim() {
        return Err(Error::Protocol(
            "embedding dims differ between the two model snapshots".to_string(),
        ));
    }
    let embed_dim = cur_model.embed_dim();
    if memory.dim() != Some(embed_dim) {
        return Err(Error::shape(
            "train_transition",
            format!(
                "memory dim {:?} does not match embedding dim {embed_dim}",
                memory.dim()
            ),
        ));
    }

    let mut pair = TranslationPair::new(embed_dim, cfg.hidden_dim, master_seed, transition_id)?;
    if cfg.epochs == 0 || !cfg.any_term_active() {
        return Ok(pair);
    }

    let (_, proto_values) = memory.stacked_values()?;
    let mut merged = merged_pair_params(&pair)?;
    let mut opt = Adam::new(&merged, AdamConfig::with_lr(cfg.lr))?;
    let mut batch_rng = rng(master_seed, Stream::TransitionBatch, transition_id);
    let mut proto_rng = rng(master_seed, Stream::PrototypeSample, transition_id);

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..task.train_count()).collect();
        crate::stream::seeded_shuffle(&mut order, &mut batch_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &task.train()[i]).collect();
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let feats: Tensor<T> = TaskDataset::batch_of(&samples);
            let z_old = prev_model.embed(&feats)?;
            let z_cur = cur_model.embed(&feats)?;
            let plan = if cfg.triplet_terms_active() {
                Some(plan_transition_triplets(
                    &labels,
                    proto_values.rows(),
                    &mut proto_rng,
                )?)
            } else {
                None
            };
            let mut rec = grad(&merged, |g| {
                build_transition_loss(
                    g,
                    &pair,
                    z_old.clone(),
                    z_cur.clone(),
                    proto_values.clone(),
                    plan.as_ref(),
                    cfg,
                )
            })?;
            if cfg.freeze_cur {
                // Zero gradients keep Adam moments at zero, so the
                // current-side map stays bitwise at its identity init.
                for (name, g) in rec.grads_mut().iter_mut() {
                    if name.starts_with("cur.") {
                        *g = Tensor::zeros(g.shape());
                    }
                }
            }
            opt.step(&mut merged, rec.grads())?;
            if cfg.weight_decay > 0.0 {
                let shrink = T::from_f64(1.0 - cfg.lr * cfg.weight_decay);
                for (name, t) in merged.iter_mut() {
                    let local = name.rsplit('.').next().unwrap_or(name);
                    if !local.starts_with('w') || (cfg.freeze_cur && name.starts_with("cur.")) {
                        continue;
                    }
                    for v in t.data_mut().iter_mut() {
                        *v = *v * shrink;
                    }
                }
            }
        }
    }

    pair.g_old.set_params(merged.section("old."))?;
    pair.g_cur.set_params(merged.section("cur."))?;
    Ok(pair)
}

/// Applies a trained pair to the memory: every existing entry moves
/// through the old-side map, every new prototype enters through the
/// current-side map. The memory is replaced in one swap; on error it is
/// left untouched.
pub fn update_memory<T: Real>(
    memory: &mut PrototypeMemory<T>,
    pair: &TranslationPair<T>,
    new_protos: Vec<(usize, Tensor<T>)>,
    origin_task: usize,
    chain: bool,
) -> Result<()> {
    let mut staged = PrototypeMemory {
        entries: BTreeMap::new(),
        log: memory.log.clone(),
    };
    for (&class, entry) in &memory.entries {
        let source = if chain { &entry.value } else { &entry.raw };
        let moved = pair.translate_old(source)?;
        staged.entries.insert(
            class,
            ProtoEntry {
                value: moved,
                raw: entry.raw.clone(),
                origin_task: entry.origin_task,
            },
        );
    }
    for (class, u) in new_protos {
        if staged.entries.contains_key(&class) {
            return Err(Error::Protocol(format!(
                "class {class} already has a prototype"
            )));
        }
        let value = pair.translate_cur(&u)?;
        value.check_finite("prototype")?;
        staged.entries.insert(
            class,
            ProtoEntry {
                value,
                raw: u,
                origin_task,
            },
        );
        staged.log.push(class);
    }
    *memory = staged;
    Ok(())
}
