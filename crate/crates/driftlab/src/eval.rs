//! Nearest-class-mean classification and the two forgetting metrics.
//!
//! After task k the whole history is re-evaluated: test samples of every
//! task j <= k go through the current model (old embeddings are never
//! cached), optionally through the current-side translation map, and are
//! classified against the full prototype memory. The classifier never
//! sees task identity.
//!
//! Indices here are zero-based: row `k` of the accuracy matrix holds
//! accuracies after training task `k`, entries `0..=k`.

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingModel;
use crate::error::{Error, Result};
use crate::stream::{Sample, TaskStream};
use crate::tensor::{Real, Tensor};
use crate::translation::{PrototypeMemory, TranslationPair};

/// Lower-triangular accuracy record `a[k][j]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix { rows: Vec::new() }
    }

    /// Appends the row for the next task; must hold exactly one more
    /// entry than the previous row, all in [0, 1].
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::Protocol(format!(
                "row {} must have {} entries, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Protocol(format!(
                "accuracies must lie in [0, 1]: {row:?}"
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Number of completed rows (= tasks evaluated so far).
    pub fn task_count(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, k: usize) -> Option<&[f64]> {
        self.rows.get(k).map(Vec::as_slice)
    }

    pub fn a(&self, k: usize, j: usize) -> Option<f64> {
        self.rows.get(k).and_then(|r| r.get(j)).copied()
    }

    /// Mean of row `k`: average accuracy over all tasks seen so far.
    pub fn average_incremental_accuracy(&self, k: usize) -> Result<f64> {
        let row = self
            .row(k)
            .ok_or_else(|| Error::Protocol(format!("accuracy row {k} not populated")))?;
        Ok(row.iter().sum::<f64>() / row.len() as f64)
    }

    /// Mean over tasks `j < k` of `max_{l < k} a[l][j] - a[k][j]`:
    /// how far each old task has dropped from its best past accuracy.
    /// Negative values mean old tasks improved.
    pub fn average_forgetting(&self, k: usize) -> Result<f64> {
        if k < 1 {
            return Err(Error::Protocol(
                "forgetting needs at least two trained tasks".to_string(),
            ));
        }
        if self.row(k).is_none() {
            return Err(Error::Protocol(format!("accuracy row {k} not populated")));
        }
        let mut total = 0.0;
        for j in 0..k {
            let best = (j..k)
                .map(|l| self.a(l, j).expect("triangular rows populated"))
                .fold(f64::NEG_INFINITY, f64::max);
            total += best - self.a(k, j).expect("row checked");
        }
        Ok(total / k as f64)
    }

    /// Average incremental accuracy per completed task.
    pub fn accuracy_series(&self) -> Vec<f64> {
        (0..self.task_count())
            .map(|k| self.average_incremental_accuracy(k).expect("row exists"))
            .collect()
    }

    /// Average forgetting per completed task. The first entry is 0 by
    /// convention: before a second task there is nothing to forget.
    pub fn forgetting_series(&self) -> Vec<f64> {
        (0..self.task_count())
            .map(|k| {
                if k == 0 {
                    0.0
                } else {
                    self.average_forgetting(k).expect("row exists")
                }
            })
            .collect()
    }
}

/// Nearest prototype by squared Euclidean distance; ties go to the
/// smallest class id.
pub fn ncm_classify<T: Real>(
    queries: &Tensor<T>,
    memory: &PrototypeMemory<T>,
) -> Result<Vec<usize>> {
    let (classes, protos) = memory.stacked_values()?;
    let queries = queries.as_batch();
    if queries.cols() != protos.cols() {
        return Err(Error::shape(
            "ncm_classify",
            format!(
                "queries have dim {}, prototypes dim {}",
                queries.cols(),
                protos.cols()
            ),
        ));
    }
    let mut out = Vec::with_capacity(queries.rows());
    for q in 0..queries.rows() {
        let mut best = 0usize;
        let mut best_d = T::infinity();
        // Ascending class order + strict improvement = smallest-id ties.
        for (i, _) in classes.iter().enumerate() {
            let d = Tensor::sq_dist(queries.row(q), protos.row(i));
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        out.push(classes[best]);
    }
    Ok(out)
}

/// Computes accuracy row `k`: every task `j <= k` re-embedded with the
/// current model, mapped through `pair`'s current-side map when present,
/// and NCM-classified against the full memory.
pub fn evaluate_after_task<T: Real>(
    k: usize,
    stream: &TaskStream,
    model: &EmbeddingModel<T>,
    pair: Option<&TranslationPair<T>>,
    memory: &PrototypeMemory<T>,
) -> Result<Vec<f64>> {
    if k >= stream.len() {
        return Err(Error::Protocol(format!(
            "task index {k} out of range for a stream of {}",
            stream.len()
        )));
    }
    let mut row = Vec::with_capacity(k + 1);
    for j in 0..=k {
        let task = stream.task(j);
        if task.test().is_empty() {
            return Err(Error::Data(format!("task {j} has no test split")));
        }
        let samples: Vec<&Sample> = task.test().iter().collect();
        let z = model.embed_samples(&samples)?;
        let z = match pair {
            Some(p) => p.translate_cur(&z)?,
            None => z,
        };
        let preds = ncm_classify(&z, memory)?;
        let correct = preds
            .iter()
            .zip(samples.iter())
            .filter(|(p, s)| **p == s.label)
            .count();
        row.push(correct as f64 / samples.len() as f64);
    }
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::{rng, Stream};
    use crate::stream::make_synthetic_stream;

    fn mem(entries: &[(usize, Vec<f64>)]) -> PrototypeMemory<f64> {
        let mut m = PrototypeMemory::new();
        for (c, v) in entries {
            m.insert(*c, Tensor::from_vec(&[v.len()], v.clone()).unwrap(), 0)
                .unwrap();
        }
        m
    }

    #[test]
    fn ncm_picks_nearest_prototype() {
        let m = mem(&[(7, vec![0.0, 0.0]), (3, vec![1.0, 1.0])]);
        let q = Tensor::from_vec(&[2, 2], vec![0.1, 0.0, 0.9, 1.2]).unwrap();
        assert_eq!(ncm_classify(&q, &m).unwrap(), vec![7, 3]);
    }

    #[test]
    fn exact_prototype_match_wins() {
        let m = mem(&[(0, vec![0.5, -0.5]), (1, vec![2.0, 2.0])]);
        let q = Tensor::from_vec(&[2], vec![2.0, 2.0]).unwrap();
        assert_eq!(ncm_classify(&q, &m).unwrap(), vec![1]);
    }

    #[test]
    fn ties_break_to_smallest_class_id() {
        let m = mem(&[(9, vec![1.0, 0.0]), (4, vec![-1.0, 0.0])]);
        let q = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(ncm_classify(&q, &m).unwrap(), vec![4]);
    }

    #[test]
    fn insertion_order_does_not_matter() {
        let a = mem(&[(0, vec![0.0]), (1, vec![1.0]), (2, vec![2.0])]);
        let b = mem(&[(2, vec![2.0]), (0, vec![0.0]), (1, vec![1.0])]);
        let q = Tensor::from_vec(&[3, 1], vec![0.2, 1.9, 0.9]).unwrap();
        assert_eq!(ncm_classify(&q, &a).unwrap(), ncm_classify(&q, &b).unwrap());
    }

    #[test]
    fn empty_memory_is_protocol_error() {
        let m = PrototypeMemory::<f64>::new();
        let q = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            ncm_classify(&q, &m).unwrap_err(),
            Error::Protocol(_)
        ));
    }

    #[test]
    fn rigid_shift_of_queries_and_prototypes_preserves_predictions() {
        let m = mem(&[(0, vec![0.3, -0.2]), (5, vec![-1.0, 0.4]), (2, vec![0.0, 2.0])]);
        let q = Tensor::from_vec(&[4, 2], vec![0.1, 0.1, -0.8, 0.3, 0.4, 1.5, 0.0, 0.0]).unwrap();
        let base = ncm_classify(&q, &m).unwrap();

        let shift = [10.0, -3.5];
        let mut shifted_mem = PrototypeMemory::new();
        for (c, e) in m.iter() {
            let v: Vec<f64> = e
                .value
                .data()
                .iter()
                .zip(shift.iter())
                .map(|(a, s)| a + s)
                .collect();
            shifted_mem
                .insert(c, Tensor::from_vec(&[2], v).unwrap(), 0)
                .unwrap();
        }
        let shifted_q = Tensor::from_vec(
            &[4, 2],
            q.data()
                .chunks(2)
                .flat_map(|r| [r[0] + shift[0], r[1] + shift[1]])
                .collect(),
        )
        .unwrap();
        assert_eq!(ncm_classify(&shifted_q, &shifted_mem).unwrap(), base);
    }

    #[test]
    fn matrix_accepts_only_triangular_rows() {
        let mut m = AccuracyMatrix::new();
        m.push_row(vec![0.9]).unwrap();
        assert!(m.push_row(vec![0.8]).is_err());
        m.push_row(vec![0.8, 0.7]).unwrap();
        assert!(m.push_row(vec![0.1, 0.2, 1.5]).is_err());
    }

    #[test]
    fn accuracy_mean_and_forgetting_basics() {
        let mut m = AccuracyMatrix::new();
        m.push_row(vec![0.9]).unwrap();
        m.push_row(vec![0.7, 0.6]).unwrap();
        assert_eq!(m.average_incremental_accuracy(0).unwrap(), 0.9);
        assert!((m.average_incremental_accuracy(1).unwrap() - 0.65).abs() < 1e-12);
        // f_0 at k=1: best past 0.9, now 0.7.
        assert!((m.average_forgetting(1).unwrap() - 0.2).abs() < 1e-12);
        assert!(m.average_forgetting(0).is_err());
    }

    #[test]
    fn constant_columns_never_forget() {
        let mut m = AccuracyMatrix::new();
        m.push_row(vec![0.8]).unwrap();
        m.push_row(vec![0.8, 0.6]).unwrap();
        m.push_row(vec![0.8, 0.6, 0.9]).unwrap();
        assert_eq!(m.average_forgetting(2).unwrap(), 0.0);
    }

    #[test]
    fn improvement_yields_negative_forgetting() {
        let mut m = AccuracyMatrix::new();
        m.push_row(vec![0.5]).unwrap();
        m.push_row(vec![0.7, 0.6]).unwrap();
        assert!((m.average_forgetting(1).unwrap() + 0.2).abs() < 1e-12);
    }

    #[test]
    fn series_lengths_match_task_count() {
        let mut m = AccuracyMatrix::new();
        m.push_row(vec![1.0]).unwrap();
        m.push_row(vec![0.9, 0.8]).unwrap();
        m.push_row(vec![0.9, 0.7, 0.6]).unwrap();
        assert_eq!(m.accuracy_series().len(), 3);
        assert_eq!(m.forgetting_series().len(), 3);
        assert_eq!(m.forgetting_series()[0], 0.0);
    }

    #[test]
    fn zero_spread_first_task_is_perfectly_classified() {
        let stream = make_synthetic_stream(1, 3, 10, 5, 0.0, 77).unwrap();
        let mut r = rng(77, Stream::EmbedInit, 0);
        let model = EmbeddingModel::<f64>::new(&[5, 8, 4], true, &mut r).unwrap();
        let mut memory = PrototypeMemory::new();
        for (c, u) in crate::translation::compute_prototypes(&model, stream.task(0)).unwrap() {
            memory.insert(c, u, 0).unwrap();
        }
        let row = evaluate_after_task(0, &stream, &model, None, &memory).unwrap();
        assert_eq!(row, vec![1.0]);
    }
}
