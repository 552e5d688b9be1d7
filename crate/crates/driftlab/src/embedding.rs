//! Triplet-loss training of the embedding network, one task at a time.
//!
//! The extractor never grows: every task fine-tunes the same parameter
//! set. Forgetting countermeasures plug in as an optional penalty added
//! to the triplet loss; with the penalty weight at zero the loss graph is
//! built without any penalty nodes, so such a run is bit-identical to
//! plain fine-tuning.

use rand_chacha::rand_core::RngCore;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::graph::{grad, Graph, NodeId};
use crate::net::{Activation, Init, MlpNet};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::regularizer::{lwf_penalty_on, quadratic_penalty_on, ImportanceMap, RegKind};
use crate::seeds::{rng, Stream};
use crate::stream::{Sample, TaskDataset};
use crate::tensor::{Real, Tensor};

/// Embedding extractor: an MLP plus an output-normalization switch.
#[derive(Debug, Clone)]
pub struct EmbeddingModel<T: Real> {
    net: MlpNet<T>,
    normalize_output: bool,
}

impl<T: Real> EmbeddingModel<T> {
    /// ReLU hidden layers, He init. `dims` runs input to embedding dim.
    pub fn new<R: RngCore>(dims: &[usize], normalize_output: bool, rng: &mut R) -> Result<Self> {
        let net = MlpNet::new(dims, Activation::Relu, Init::He, rng)?;
        Ok(EmbeddingModel {
            net,
            normalize_output,
        })
    }

    pub fn from_net(net: MlpNet<T>, normalize_output: bool) -> Self {
        EmbeddingModel {
            net,
            normalize_output,
        }
    }

    pub fn net(&self) -> &MlpNet<T> {
        &self.net
    }

    pub fn normalize_output(&self) -> bool {
        self.normalize_output
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn params(&self) -> &ParamSet<T> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        self.net.params_mut()
    }

    pub fn set_params(&mut self, params: ParamSet<T>) -> Result<()> {
        self.net.set_params(params)
    }

    /// Embeds a batch (rows = samples). Output rows are unit-norm when
    /// normalization is on.
    pub fn embed(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.net.forward(batch)?;
        Ok(if self.normalize_output {
            z.l2_normalize_rows()
        } else {
            z
        })
    }

    /// Embeds samples directly, casting raw f64 features into `T`.
    pub fn embed_samples(&self, samples: &[&Sample]) -> Result<Tensor<T>> {
        self.embed(&TaskDataset::batch_of(samples))
    }

    /// Graph version of [`embed`](Self::embed) for training.
    pub fn embed_on(
        &self,
        graph: &mut Graph<'_, T>,
        input: NodeId,
        prefix: &str,
    ) -> Result<NodeId> {
        let z = self.net.forward_on(graph, input, prefix)?;
        if self.normalize_output {
            graph.normalize_rows(z)
        } else {
            Ok(z)
        }
    }

    pub fn cast<U: Real>(&self) -> EmbeddingModel<U> {
        EmbeddingModel {
            net: self.net.cast(),
            normalize_output: self.normalize_output,
        }
    }
}

/// Index triple into a batch: anchor/positive share a label, the
/// negative differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// How triplets are drawn from a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiningPolicy {
    /// Every valid (anchor, positive, negative) combination, in index
    /// order. Deterministic; the default at desk scale.
    AllValid,
    /// One uniformly random (positive, negative) per eligible anchor.
    RandomPerAnchor,
}

/// Enumerates triplets over batch labels. Anchors without a same-label
/// partner or without any different-label sample yield nothing; a batch
/// with no valid triplet yields an empty list.
pub fn mine_triplets(
    labels: &[usize],
    policy: MiningPolicy,
    rng: &mut impl RngCore,
) -> Vec<Triplet> {
    let n = labels.len();
    let mut out = Vec::new();
    for a in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&p| p != a && labels[p] == labels[a])
            .collect();
        let negatives: Vec<usize> = (0..n).filter(|&m| labels[m] != labels[a]).collect();
        if positives.is_empty() || negatives.is_empty() {
            continue;
        }
        match policy {
            MiningPolicy::AllValid => {
                for &p in &positives {
                    for &m in &negatives {
                        out.push(Triplet {
                            anchor: a,
                            positive: p,
                            negative: m,
                        });
                    }
                }
            }
            MiningPolicy::RandomPerAnchor => {
                let p = positives[(rng.next_u64() % positives.len() as u64) as usize];
                let m = negatives[(rng.next_u64() % negatives.len() as u64) as usize];
                out.push(Triplet {
                    anchor: a,
                    positive: p,
                    negative: m,
                });
            }
        }
    }
    out
}

fn check_margin(margin: f64) -> Result<()> {
    if !(margin > 0.0 && margin.is_finite()) {
        return Err(Error::Config(format!(
            "triplet margin must be positive and finite, got {margin}"
        )));
    }
    Ok(())
}

fn check_triplet_bounds(n: usize, triplets: &[Triplet]) -> Result<()> {
    for t in triplets {
        if t.anchor >= n || t.positive >= n || t.negative >= n {
            return Err(Error::shape(
                "triplet_loss",
                format!("triplet {t:?} out of range for batch of {n}"),
            ));
        }
    }
    Ok(())
}

/// Mean over triplets of `max(0, d+ - d- + margin)` with squared
/// Euclidean distances. An empty triplet list contributes 0.
pub fn triplet_loss<T: Real>(
    embeddings: &Tensor<T>,
    triplets: &[Triplet],
    margin: f64,
) -> Result<T> {
    check_margin(margin)?;
    check_triplet_bounds(embeddings.rows(), triplets)?;
    if triplets.is_empty() {
        log::warn!("triplet_loss over an empty triplet list; returning 0");
        return Ok(T::zero());
    }
    let m = T::from_f64(margin);
    let mut acc = T::zero();
    for t in triplets {
        let d_pos = Tensor::sq_dist(embeddings.row(t.anchor), embeddings.row(t.positive));
        let d_neg = Tensor::sq_dist(embeddings.row(t.anchor), embeddings.row(t.negative));
        let viol = d_pos - d_neg + m;
        if viol > T::zero() {
            acc += viol;
        }
    }
    Ok(acc / T::from_f64(triplets.len() as f64))
}

/// Graph version of [`triplet_loss`]; gradients flow into `embeddings`.
pub fn triplet_loss_on<T: Real>(
    graph: &mut Graph<'_, T>,
    embeddings: NodeId,
    triplets: &[Triplet],
    margin: f64,
) -> Result<NodeId> {
    check_margin(margin)?;
    check_triplet_bounds(graph.value(embeddings).rows(), triplets)?;
    if triplets.is_empty() {
        log::warn!("triplet_loss over an empty triplet list; returning 0");
        return graph.constant(Tensor::scalar(T::zero()));
    }
    let anchors: Vec<usize> = triplets.iter().map(|t| t.anchor).collect();
    let positives: Vec<usize> = triplets.iter().map(|t| t.positive).collect();
    let negatives: Vec<usize> = triplets.iter().map(|t| t.negative).collect();
    let a = graph.gather_rows(embeddings, anchors)?;
    let p = graph.gather_rows(embeddings, positives)?;
    let n = graph.gather_rows(embeddings, negatives)?;
    let dp = graph.sub(a, p)?;
    let dp = graph.square(dp)?;
    let d_pos = graph.sum_rows(dp)?;
    let dn = graph.sub(a, n)?;
    let dn = graph.square(dn)?;
    let d_neg = graph.sum_rows(dn)?;
    let gap = graph.sub(d_pos, d_neg)?;
    let shifted = graph.offset(gap, margin)?;
    let hinged = graph.hinge(shifted)?;
    graph.mean_all(hinged)
}

/// Per-task training settings.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub margin: f64,
    pub regularizer: RegKind,
    /// Weight on the penalty term; 0 disables it structurally.
    pub gamma_reg: f64,
    pub mining: MiningPolicy,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_margin(self.margin)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".to_string()));
        }
        if !(self.gamma_reg >= 0.0 && self.gamma_reg.is_finite()) {
            return Err(Error::Config(format!(
                "gamma_reg must be finite and non-negative, got {}",
                self.gamma_reg
            )));
        }
        Ok(())
    }

    fn penalty_active(&self) -> bool {
        self.regularizer != RegKind::None && self.gamma_reg > 0.0
    }
}

/// Trains `model` on one task with Adam over shuffled minibatches.
///
/// `prev_model` is the frozen snapshot from the previous task; it is
/// required by LwF (distillation target) and by EWC/MAS (anchor of the
/// quadratic penalty, together with `importance`). Batches that yield no
/// valid triplet are skipped with a warning.
pub fn train_task<T: Real>(
    model: &mut EmbeddingModel<T>,
    task: &TaskDataset,
    cfg: &TrainConfig,
    prev_model: Option<&EmbeddingModel<T>>,
    importance: Option<&ImportanceMap<T>>,
    master_seed: u64,
) -> Result<()> {
    cfg.validate()?;
    match cfg.regularizer {
        RegKind::None => {}
        RegKind::Lwf => {
            if prev_model.is_none() {
                return Err(Error::Protocol(
                    "LwF needs the previous-task model snapshot".to_string(),
                ));
            }
        }
        RegKind::Ewc | RegKind::Mas => {
            if prev_model.is_none() || importance.is_none() {
                return Err(Error::Protocol(format!(
                    "{:?} needs both the previous model and an importance map",
                    cfg.regularizer
                )));
            }
            let want = cfg.regularizer.estimator().expect("ewc/mas map to estimators");
            let got = importance.expect("checked").estimator();
            if got != want {
                return Err(Error::Protocol(format!(
                    "importance map was estimated as {got:?}, but {:?} expects {want:?}",
                    cfg.regularizer
                )));
            }
        }
    }
    if let Some(prev) = prev_model {
        if !prev.params().same_layout(model.params()) {
            return Err(Error::Protocol(
                "previous model architecture differs from the current one".to_string(),
            ));
        }
    }

    let mut opt = Adam::new(model.params(), AdamConfig::with_lr(cfg.lr))?;
    let mut batch_rng = rng(master_seed, Stream::EmbedBatch, task.task_id() as u64);
    let mut mine_rng = rng(master_seed, Stream::TripletMine, task.task_id() as u64);

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..task.train_count()).collect();
        crate::stream::seeded_shuffle(&mut order, &mut batch_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &task.train()[i]).collect();
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let triplets = mine_triplets(&labels, cfg.mining, &mut mine_rng);
            if triplets.is_empty() {
                log::warn!(
                    "task {}: batch of {} samples produced no triplets; skipping",
                    task.task_id(),
                    samples.len()
                );
                continue;
            }
            let feats: Tensor<T> = TaskDataset::batch_of(&samples);

            // Penalty inputs are constants; only the current model learns.
            let prev_z = if cfg.penalty_active() && cfg.regularizer == RegKind::Lwf {
                Some(prev_model.expect("checked").embed(&feats)?)
            } else {
                None
            };

            let record = grad(model.params(), |g| {
                let x = g.constant(feats.clone())?;
                let z = model.embed_on(g, x, "")?;
                let tri = triplet_loss_on(g, z, &triplets, cfg.margin)?;
                if !cfg.penalty_active() {
                    return Ok(tri);
                }
                let penalty = match cfg.regularizer {
                    RegKind::Lwf => lwf_penalty_on(g, z, prev_z.clone().expect("prepared"))?,
                    RegKind::Ewc | RegKind::Mas => quadratic_penalty_on(
                        g,
                        prev_model.expect("checked").params(),
                        importance.expect("checked"),
                        "",
                    )?,
                    RegKind::None => unreachable!("penalty_active is false for None"),
                };
                let weighted = g.scale(penalty, cfg.gamma_reg)?;
                g.add(tri, weighted)
            })?;
            opt.step(model.params_mut(), record.grads())?;
        }
    }
    Ok(())
}

/// One per-anchor RNG used when mining needs randomness; exposed so
/// callers that only mine once (estimators, tests) share the stream
/// logic.
pub fn mining_rng(master_seed: u64, task_id: usize) -> ChaCha12Rng {
    rng(master_seed, Stream::TripletMine, task_id as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::make_synthetic_stream;

    fn no_rng() -> ChaCha12Rng {
        rng(0, Stream::TripletMine, 0)
    }

    #[test]
    fn all_valid_counts_match_enumeration() {
        let mut r = no_rng();
        assert_eq!(mine_triplets(&[0, 0, 1], MiningPolicy::AllValid, &mut r).len(), 2);
        assert_eq!(
            mine_triplets(&[0, 0, 1, 1], MiningPolicy::AllValid, &mut r).len(),
            8
        );
        assert!(mine_triplets(&[2, 2, 2], MiningPolicy::AllValid, &mut r).is_empty());
    }

    #[test]
    fn mined_triplets_are_valid() {
        let labels = [0, 1, 0, 2, 1, 0];
        let mut r = no_rng();
        for policy in [MiningPolicy::AllValid, MiningPolicy::RandomPerAnchor] {
            for t in mine_triplets(&labels, policy, &mut r) {
                assert_ne!(t.anchor, t.positive);
                assert_eq!(labels[t.anchor], labels[t.positive]);
                assert_ne!(labels[t.anchor], labels[t.negative]);
            }
        }
    }

    #[test]
    fn random_per_anchor_yields_one_per_eligible_anchor() {
        let labels = [0, 0, 1, 1, 1];
        let mut r = no_rng();
        let got = mine_triplets(&labels, MiningPolicy::RandomPerAnchor, &mut r);
        assert_eq!(got.len(), 5);
        for (i, t) in got.iter().enumerate() {
            assert_eq!(t.anchor, i);
        }
    }

    #[test]
    fn triplet_loss_hinge_boundary_and_arithmetic() {
        // Rows engineered so d+ and d- are exact.
        // a=(0,0), p=(0.2^0.5? ...) simpler: use 1-d embeddings.
        let emb = Tensor::from_vec(&[3, 1], vec![0.0, 0.2_f64.sqrt(), 0.5_f64.sqrt()]).unwrap();
        let t = [Triplet {
            anchor: 0,
            positive: 1,
            negative: 2,
        }];
        // d+ = 0.2, d- = 0.5, margin 0.3 -> exactly at the hinge.
        let l = triplet_loss(&emb, &t, 0.3).unwrap();
        assert!(l.abs() < 1e-12);

        let emb = Tensor::from_vec(&[3, 1], vec![0.0, 0.5_f64.sqrt(), 0.2_f64.sqrt()]).unwrap();
        // d+ = 0.5, d- = 0.2, margin 0.1 -> loss 0.4.
        let l = triplet_loss(&emb, &t, 0.1).unwrap();
        assert!((l - 0.4).abs() < 1e-12, "got {l}");
    }

    #[test]
    fn empty_triplets_give_zero() {
        let emb = Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(triplet_loss(&emb, &[], 0.3).unwrap(), 0.0);
    }

    #[test]
    fn graph_loss_matches_value_loss() {
        let mut r = rng(3, Stream::EmbedInit, 0);
        let model = EmbeddingModel::<f64>::new(&[4, 8, 3], true, &mut r).unwrap();
        let stream = make_synthetic_stream(1, 3, 8, 4, 0.2, 17).unwrap();
        let task = stream.task(0);
        let samples: Vec<&Sample> = task.train().iter().collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let mut mr = no_rng();
        let triplets = mine_triplets(&labels, MiningPolicy::AllValid, &mut mr);
        assert!(!triplets.is_empty());

        let z = model.embed_samples(&samples).unwrap();
        let direct = triplet_loss(&z, &triplets, 0.3).unwrap();

        let feats = TaskDataset::batch_of(&samples);
        let rec = grad(model.params(), |g| {
            let x = g.constant(feats.clone())?;
            let zn = model.embed_on(g, x, "")?;
            triplet_loss_on(g, zn, &triplets, 0.3)
        })
        .unwrap();
        assert!((rec.loss - direct).abs() < 1e-12);
    }

    #[test]
    fn normalized_embeddings_have_unit_norm() {
        let mut r = rng(5, Stream::EmbedInit, 0);
        let model = EmbeddingModel::<f64>::new(&[6, 10, 4], true, &mut r).unwrap();
        let stream = make_synthetic_stream(1, 2, 10, 6, 0.3, 2).unwrap();
        let samples: Vec<&Sample> = stream.task(0).train().iter().collect();
        let z = model.embed_samples(&samples).unwrap();
        for i in 0..z.rows() {
            let norm: f64 = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "row {i} norm {norm}");
        }
    }

    #[test]
    fn training_separates_a_two_class_task() {
        let stream = make_synthetic_stream(1, 2, 30, 8, 0.15, 42).unwrap();
        let task = stream.task(0);
        let mut init_rng = rng(42, Stream::EmbedInit, 0);
        let mut model = EmbeddingModel::<f64>::new(&[8, 16, 4], true, &mut init_rng).unwrap();
        let cfg = TrainConfig {
            epochs: 12,
            batch_size: 16,
            lr: 0.01,
            margin: 0.3,
            regularizer: RegKind::None,
            gamma_reg: 0.0,
            mining: MiningPolicy::AllValid,
        };
        train_task(&mut model, task, &cfg, None, None, 42).unwrap();

        let samples: Vec<&Sample> = task.train().iter().collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let z = model.embed_samples(&samples).unwrap();
        let (mut within, mut wn, mut between, mut bn) = (0.0, 0u64, 0.0, 0u64);
        for i in 0..z.rows() {
            for j in (i + 1)..z.rows() {
                let d = Tensor::sq_dist(z.row(i), z.row(j));
                if labels[i] == labels[j] {
                    within += d;
                    wn += 1;
                } else {
                    between += d;
                    bn += 1;
                }
            }
        }
        let within = within / wn as f64;
        let between = between / bn as f64;
        assert!(
            within < between,
            "within-class {within} should be below between-class {between}"
        );
    }

    #[test]
    fn zero_gamma_matches_regularizer_none_bitwise() {
        let stream = make_synthetic_stream(1, 2, 12, 4, 0.1, 8).unwrap();
        let task = stream.task(0);
        let make_model = || {
            let mut r = rng(8, Stream::EmbedInit, 0);
            EmbeddingModel::<f64>::new(&[4, 8, 3], true, &mut r).unwrap()
        };
        let prev = make_model();

        let mut plain = make_model();
        let mut lwf_zero = make_model();
        let base = TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr: 0.01,
            margin: 0.3,
            regularizer: RegKind::None,
            gamma_reg: 0.0,
            mining: MiningPolicy::AllValid,
        };
        train_task(&mut plain, task, &base, None, None, 8).unwrap();
        let lwf_cfg = TrainConfig {
            regularizer: RegKind::Lwf,
            ..base
        };
        train_task(&mut lwf_zero, task, &lwf_cfg, Some(&prev), None, 8).unwrap();

        for ((_, a), (_, b)) in plain.params().iter().zip(lwf_zero.params().iter()) {
            assert_eq!(a.data(), b.data(), "zero-weight LwF must not perturb training");
        }
    }

    #[test]
    fn missing_prev_model_is_a_protocol_error() {
        let stream = make_synthetic_stream(1, 2, 8, 4, 0.1, 8).unwrap();
        let mut r = rng(8, Stream::EmbedInit, 0);
        let mut model = EmbeddingModel::<f64>::new(&[4, 6, 3], true, &mut r).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr: 0.01,
            margin: 0.3,
            regularizer: RegKind::Lwf,
            gamma_reg: 1.0,
            mining: MiningPolicy::AllValid,
        };
        let err = train_task(&mut model, stream.task(0), &cfg, None, None, 8).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }
}
