//! Forgetting-prevention penalties and their importance estimators.
//!
//! Three penalties share one plug-in point in the training loss:
//!
//! - output distillation: Frobenius norm between current and previous
//!   embeddings of the same batch, gradients into the current model only;
//! - two quadratic parameter anchors, `1/2 * sum_p w_p (theta_p -
//!   theta_p')^2`, differing in how the weights `w_p` are estimated:
//!   squared triplet-loss gradients (diagonal Fisher) or absolute
//!   gradients of the squared output norm.
//!
//! The output-norm estimator deliberately reads the network before any
//! output normalization: a unit-normalized output has constant norm and
//! would zero out every weight.

use crate::embedding::{mine_triplets, triplet_loss_on, EmbeddingModel, MiningPolicy};
use crate::error::{Error, Result};
use crate::graph::{grad, Graph, NodeId};
use crate::params::ParamSet;
use crate::seeds::{rng, Stream};
use crate::stream::{Sample, TaskDataset};
use crate::tensor::{Real, Tensor};

/// Penalty selection for embedding training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegKind {
    None,
    Lwf,
    Ewc,
    Mas,
}

impl RegKind {
    /// The importance estimator this penalty consumes, if any.
    pub fn estimator(self) -> Option<Estimator> {
        match self {
            RegKind::Ewc => Some(Estimator::Fisher),
            RegKind::Mas => Some(Estimator::Mas),
            RegKind::None | RegKind::Lwf => None,
        }
    }
}

/// Provenance tag of an importance map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Fisher,
    Mas,
}

/// Non-negative per-parameter weights, shaped like the model.
#[derive(Debug, Clone)]
pub struct ImportanceMap<T: Real> {
    estimator: Estimator,
    weights: ParamSet<T>,
}

impl<T: Real> ImportanceMap<T> {
    pub fn new(estimator: Estimator, weights: ParamSet<T>) -> Result<Self> {
        for (name, t) in weights.iter() {
            t.check_finite(&format!("importance[{name}]"))?;
            if t.data().iter().any(|&v| v < T::zero()) {
                return Err(Error::Estimation(format!(
                    "importance weights for `{name}` contain negative entries"
                )));
            }
        }
        Ok(ImportanceMap { estimator, weights })
    }

    pub fn estimator(&self) -> Estimator {
        self.estimator
    }

    pub fn weights(&self) -> &ParamSet<T> {
        &self.weights
    }

    /// Elementwise sum with an older map of the same estimator; used when
    /// importance is configured to accumulate across tasks instead of
    /// being recomputed fresh.
    pub fn accumulate(&mut self, other: &ImportanceMap<T>) -> Result<()> {
        if self.estimator != other.estimator {
            return Err(Error::Protocol(format!(
                "cannot accumulate {:?} importance into {:?}",
                other.estimator, self.estimator
            )));
        }
        if !self.weights.same_layout(&other.weights) {
            return Err(Error::shape(
                "importance_accumulate",
                "maps have different parameter layouts".to_string(),
            ));
        }
        for i in 0..self.weights.len() {
            let name = self.weights.by_index(i).0.to_string();
            let summed = self
                .weights
                .get(&name)
                .expect("layout checked")
                .add(other.weights.get(&name).expect("layout checked"))?;
            self.weights.set(&name, summed)?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ImportanceMap<U> {
        ImportanceMap {
            estimator: self.estimator,
            weights: self.weights.cast(),
        }
    }
}

/// Frobenius distance between the two models' embeddings of one batch.
/// This is the value-only form; training uses [`lwf_penalty_on`], where
/// gradients flow into the current model alone.
pub fn lwf_penalty<T: Real>(
    cur: &EmbeddingModel<T>,
    prev: &EmbeddingModel<T>,
    batch: &Tensor<T>,
) -> Result<T> {
    if !cur.params().same_layout(prev.params()) {
        return Err(Error::Protocol(
            "distillation needs architecturally identical models".to_string(),
        ));
    }
    let zc = cur.embed(batch)?;
    let zp = prev.embed(batch)?;
    let diff = zc.sub(&zp)?;
    Ok(diff.data().iter().map(|&v| v * v).sum::<T>().sqrt())
}

/// Graph form of the distillation penalty: `||z - prev_z||_F` with
/// `prev_z` a constant.
pub fn lwf_penalty_on<T: Real>(
    graph: &mut Graph<'_, T>,
    z: NodeId,
    prev_z: Tensor<T>,
) -> Result<NodeId> {
    if graph.value(z).shape() != prev_z.shape() {
        return Err(Error::Protocol(format!(
            "embedding batches differ in shape: {:?} vs {:?}",
            graph.value(z).shape(),
            prev_z.shape()
        )));
    }
    let prev = graph.constant(prev_z)?;
    let d = graph.sub(z, prev)?;
    let sq = graph.square(d)?;
    let total = graph.sum_all(sq)?;
    graph.safe_sqrt(total)
}

/// `1/2 * sum_p w_p (theta_p - theta_p')^2` as a plain value.
pub fn quadratic_penalty<T: Real>(
    cur: &ParamSet<T>,
    prev: &ParamSet<T>,
    importance: &ImportanceMap<T>,
) -> Result<T> {
    if !cur.same_layout(prev) || !cur.same_layout(importance.weights()) {
        return Err(Error::Protocol(
            "quadratic penalty needs three layouts that match".to_string(),
        ));
    }
    let mut acc = T::zero();
    for i in 0..cur.len() {
        let (name, theta) = cur.by_index(i);
        let theta_prev = prev.get(name).expect("layout checked");
        let w = importance.weights().get(name).expect("layout checked");
        for ((&a, &b), &wi) in theta
            .data()
            .iter()
            .zip(theta_prev.data().iter())
            .zip(w.data().iter())
        {
            let d = a - b;
            acc += wi * d * d;
        }
    }
    Ok(acc / (T::one() + T::one()))
}

/// Graph form of the quadratic penalty over the current parameters found
/// under `prefix` in the graph's set; `prev` and the weights enter as
/// constants.
pub fn quadratic_penalty_on<T: Real>(
    graph: &mut Graph<'_, T>,
    prev: &ParamSet<T>,
    importance: &ImportanceMap<T>,
    prefix: &str,
) -> Result<NodeId> {
    if !prev.same_layout(importance.weights()) {
        return Err(Error::Protocol(
            "importance map does not match the previous parameters".to_string(),
        ));
    }
    let mut total: Option<NodeId> = None;
    for i in 0..prev.len() {
        let (name, theta_prev) = prev.by_index(i);
        let cur = graph.param(&format!("{prefix}{name}"))?;
        let anchor = graph.constant(theta_prev.clone())?;
        let w = graph.constant(importance.weights().get(name).expect("layout checked").clone())?;
        let d = graph.sub(cur, anchor)?;
        let sq = graph.square(d)?;
        let weighted = graph.mul(sq, w)?;
        let s = graph.sum_all(weighted)?;
        total = Some(match total {
            Some(t) => graph.add(t, s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| {
        Error::Protocol("quadratic penalty over an empty parameter set".to_string())
    })?;
    graph.scale(total, 0.5)
}

fn importance_batches<'t>(
    task: &'t TaskDataset,
    num_batches: usize,
    batch_size: usize,
    master_seed: u64,
) -> Result<Vec<Vec<&'t Sample>>> {
    if num_batches == 0 || batch_size == 0 {
        return Err(Error::Config(
            "importance estimation needs num_batches >= 1 and batch_size >= 1".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..task.train_count()).collect();
    let mut r = rng(master_seed, Stream::Importance, task.task_id() as u64);
    crate::stream::seeded_shuffle(&mut order, &mut r);
    Ok(order
        .chunks(batch_size)
        .take(num_batches)
        .map(|chunk| chunk.iter().map(|&i| &task.train()[i]).collect())
        .collect())
}

/// Diagonal Fisher estimate: mean over batches of the squared gradient
/// of the triplet loss at the trained parameters.
pub fn estimate_fisher<T: Real>(
    model: &EmbeddingModel<T>,
    task: &TaskDataset,
    num_batches: usize,
    batch_size: usize,
    margin: f64,
    master_seed: u64,
) -> Result<ImportanceMap<T>> {
    let batches = importance_batches(task, num_batches, batch_size, master_seed)?;
    let mut acc = model.params().zeros_like();
    let mut used = 0u64;
    let mut dummy = rng(master_seed, Stream::Importance, u64::MAX);
    for samples in &batches {
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let triplets = mine_triplets(&labels, MiningPolicy::AllValid, &mut dummy);
        if triplets.is_empty() {
            continue;
        }
        let feats = TaskDataset::batch_of(samples);
        let rec = grad(model.params(), |g| {
            let x = g.constant(feats.clone())?;
            let z = model.embed_on(g, x, "")?;
            triplet_loss_on(g, z, &triplets, margin)
        })?;
        for (name, gt) in rec.grads().iter() {
            let cur = acc.get(name).expect("same layout");
            let updated = cur.zip_map(gt, "fisher_acc", |a, gi| a + gi * gi)?;
            acc.set(name, updated)?;
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::Estimation(
            "no sampled batch produced a valid triplet; cannot estimate Fisher weights".to_string(),
        ));
    }
    let scale = T::from_f64(1.0 / used as f64);
    let weights = {
        let mut w = acc;
        for (_, t) in w.iter_mut() {
            *t = t.scale(scale);
        }
        w
    };
    ImportanceMap::new(Estimator::Fisher, weights)
}

/// Output-sensitivity estimate: mean over samples of the absolute
/// gradient of `||f(x)||^2`, with output normalization bypassed.
pub fn estimate_mas<T: Real>(
    model: &EmbeddingModel<T>,
    task: &TaskDataset,
    num_batches: usize,
    batch_size: usize,
    master_seed: u64,
) -> Result<ImportanceMap<T>> {
    let batches = importance_batches(task, num_batches, batch_size, master_seed)?;
    let mut acc = model.params().zeros_like();
    let mut count = 0u64;
    for samples in &batches {
        for sample in samples {
            let feats = TaskDataset::batch_of(&[sample]);
            let rec = grad(model.params(), |g| {
                let x = g.constant(feats.clone())?;
                // Raw network output: normalization would flatten the norm.
                let z = model.net().forward_on(g, x, "")?;
                let sq = g.square(z)?;
                g.sum_all(sq)
            })?;
            for (name, gt) in rec.grads().iter() {
                let cur = acc.get(name).expect("same layout");
                let updated = cur.zip_map(gt, "mas_acc", |a, gi| a + gi.abs())?;
                acc.set(name, updated)?;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Estimation(
            "no samples available for output-sensitivity estimation".to_string(),
        ));
    }
    let scale = T::from_f64(1.0 / count as f64);
    let weights = {
        let mut w = acc;
        for (_, t) in w.iter_mut() {
            *t = t.scale(scale);
        }
        w
    };
    ImportanceMap::new(Estimator::Mas, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, Init, MlpNet};
    use crate::stream::make_synthetic_stream;

    fn linear_model(w: Vec<f64>, in_dim: usize, out_dim: usize) -> EmbeddingModel<f64> {
        let mut r = rng(0, Stream::EmbedInit, 0);
        let mut net =
            MlpNet::new(&[in_dim, out_dim], Activation::Identity, Init::Zeros, &mut r).unwrap();
        net.params_mut()
            .set("w0", Tensor::from_vec(&[in_dim, out_dim], w).unwrap())
            .unwrap();
        EmbeddingModel::from_net(net, false)
    }

    #[test]
    fn identical_models_have_zero_distillation_penalty() {
        let mut r = rng(4, Stream::EmbedInit, 0);
        let m = EmbeddingModel::<f64>::new(&[3, 6, 2], true, &mut r).unwrap();
        let batch = Tensor::from_vec(&[2, 3], vec![0.1, 0.2, 0.3, -0.5, 0.4, 0.0]).unwrap();
        assert_eq!(lwf_penalty(&m, &m.clone(), &batch).unwrap(), 0.0);
    }

    #[test]
    fn distillation_penalty_is_frobenius_norm() {
        // One-hot current rows against a zero previous output:
        // ||Z||_F = sqrt(batch size).
        let n = 4;
        let mut params = ParamSet::new();
        let mut onehot = vec![0.0; n * n];
        for i in 0..n {
            onehot[i * n + i] = 1.0;
        }
        params
            .add("z", Tensor::from_vec(&[n, n], onehot).unwrap())
            .unwrap();
        let rec = grad(&params, |g| {
            let z = g.param("z")?;
            lwf_penalty_on(g, z, Tensor::zeros(&[n, n]))
        })
        .unwrap();
        assert!((rec.loss - (n as f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn quadratic_penalty_trivial_values() {
        let mut cur = ParamSet::new();
        cur.add("p", Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap())
            .unwrap();
        let prev = cur.zeros_like();
        let mut w = ParamSet::new();
        w.add("p", Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap())
            .unwrap();
        let imp = ImportanceMap::new(Estimator::Fisher, w).unwrap();
        // Difference (1,1), unit weights: 1/2 * 2 = 1.
        assert_eq!(quadratic_penalty(&cur, &prev, &imp).unwrap(), 1.0);
        // Identical parameters: exactly 0.
        assert_eq!(quadratic_penalty(&cur, &cur.clone(), &imp).unwrap(), 0.0);
    }

    #[test]
    fn graph_quadratic_matches_value_form() {
        let mut r = rng(11, Stream::EmbedInit, 0);
        let cur = EmbeddingModel::<f64>::new(&[3, 4, 2], true, &mut r).unwrap();
        let prev = EmbeddingModel::<f64>::new(&[3, 4, 2], true, &mut r).unwrap();
        let mut w = cur.params().zeros_like();
        for (i, (_, t)) in w.iter_mut().enumerate() {
            *t = t.map(|_| 0.1 * (i as f64 + 1.0));
        }
        let imp = ImportanceMap::new(Estimator::Fisher, w).unwrap();
        let direct = quadratic_penalty(cur.params(), prev.params(), &imp).unwrap();
        let rec = grad(cur.params(), |g| {
            quadratic_penalty_on(g, prev.params(), &imp, "")
        })
        .unwrap();
        assert!((rec.loss - direct).abs() < 1e-12);
    }

    #[test]
    fn importance_rejects_negative_weights() {
        let mut w = ParamSet::new();
        w.add("p", Tensor::from_vec(&[2], vec![0.5, -0.1]).unwrap())
            .unwrap();
        assert!(ImportanceMap::<f64>::new(Estimator::Mas, w).is_err());
    }

    #[test]
    fn fisher_matches_hand_looped_linear_case() {
        // 1-d embedding z = w x: the triplet gradient has the closed form
        // dL/dw = mean over active triplets of 2w((xa-xp)^2 - (xa-xn)^2).
        let xs = [0.0, 0.1, 0.5, 0.7];
        let labels = [0usize, 0, 1, 1];
        let w = 1.3;
        let margin = 0.3;
        let model = linear_model(vec![w], 1, 1);
        let samples: Vec<Sample> = xs
            .iter()
            .zip(labels.iter())
            .map(|(&x, &l)| Sample::new(Tensor::from_vec(&[1], vec![x]).unwrap(), l))
            .collect();
        let task = TaskDataset::new(0, vec![0, 1], samples, vec![]).unwrap();

        let est = estimate_fisher(&model, &task, 1, 16, margin, 77).unwrap();

        let mut grad_sum = 0.0;
        let mut count = 0.0;
        for a in 0..4 {
            for p in 0..4 {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                for n in 0..4 {
                    if labels[n] == labels[a] {
                        continue;
                    }
                    count += 1.0;
                    let dp = (xs[a] - xs[p]).powi(2);
                    let dn = (xs[a] - xs[n]).powi(2);
                    if w * w * (dp - dn) + margin > 0.0 {
                        grad_sum += 2.0 * w * (dp - dn);
                    }
                }
            }
        }
        let expected = (grad_sum / count).powi(2);
        let got = est.weights().get("w0").unwrap().data()[0];
        assert!(
            (got - expected).abs() < 1e-12,
            "fisher {got} vs analytic {expected}"
        );
    }

    #[test]
    fn mas_matches_linear_closed_form() {
        // z = x W, ||z||^2 gradient w.r.t. W_ij is 2 z_j x_i; one sample
        // makes the absolute-mean trivial to write out.
        let w = vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.75];
        let x = [0.4, -0.2];
        let model = linear_model(w.clone(), 2, 3);
        let samples = vec![
            Sample::new(Tensor::from_vec(&[2], x.to_vec()).unwrap(), 0),
            Sample::new(Tensor::from_vec(&[2], x.to_vec()).unwrap(), 0),
            Sample::new(Tensor::from_vec(&[2], vec![0.4, -0.2]).unwrap(), 1),
            Sample::new(Tensor::from_vec(&[2], vec![0.4, -0.2]).unwrap(), 1),
        ];
        let task = TaskDataset::new(0, vec![0, 1], samples, vec![]).unwrap();
        let est = estimate_mas(&model, &task, 1, 64, 5).unwrap();

        let z: Vec<f64> = (0..3)
            .map(|j| x[0] * w[j] + x[1] * w[3 + j])
            .collect();
        let got = est.weights().get("w0").unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let expected = (2.0 * z[j] * x[i]).abs();
                let v = got.data()[i * 3 + j];
                assert!(
                    (v - expected).abs() < 1e-12,
                    "W[{i}][{j}] importance {v} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn zero_output_model_has_zero_mas_importance() {
        let model = linear_model(vec![0.0; 6], 2, 3);
        let stream = make_synthetic_stream(1, 2, 8, 2, 0.2, 6).unwrap();
        let est = estimate_mas(&model, stream.task(0), 2, 4, 6).unwrap();
        for (_, t) in est.weights().iter() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn full_batch_fisher_is_sample_order_invariant() {
        let stream = make_synthetic_stream(1, 2, 10, 4, 0.2, 21).unwrap();
        let task = stream.task(0);
        let mut r = rng(99, Stream::EmbedInit, 0);
        let model = EmbeddingModel::<f64>::new(&[4, 6, 3], true, &mut r).unwrap();

        let a = estimate_fisher(&model, task, 1, 1024, 0.3, 13).unwrap();

        let mut reordered: Vec<Sample> = task.train().to_vec();
        reordered.reverse();
        let permuted =
            TaskDataset::new(0, task.classes().to_vec(), reordered, task.test().to_vec()).unwrap();
        let b = estimate_fisher(&model, &permuted, 1, 1024, 0.3, 13).unwrap();

        for ((_, ta), (_, tb)) in a.weights().iter().zip(b.weights().iter()) {
            for (&x, &y) in ta.data().iter().zip(tb.data().iter()) {
                let denom = x.abs().max(y.abs()).max(1e-12);
                assert!(
                    ((x - y).abs() / denom) < 1e-6,
                    "order-dependent fisher: {x} vs {y}"
                );
            }
        }
    }

    #[test]
    fn accumulate_sums_weights() {
        let mut w1 = ParamSet::new();
        w1.add("p", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let mut w2 = ParamSet::new();
        w2.add("p", Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap())
            .unwrap();
        let mut a = ImportanceMap::new(Estimator::Fisher, w1).unwrap();
        let b = ImportanceMap::new(Estimator::Fisher, w2).unwrap();
        a.accumulate(&b).unwrap();
        assert_eq!(a.weights().get("p").unwrap().data(), &[1.5, 2.5]);

        let c = ImportanceMap::new(
            Estimator::Mas,
            b.weights().clone(),
        )
        .unwrap();
        assert!(a.accumulate(&c).is_err());
    }
}
