//! Class-disjoint task streams from synthetic generators or feature CSVs.
//!
//! A stream is an ordered list of tasks whose class sets never overlap.
//! Raw features are stored as f64 regardless of the training precision;
//! the embedding module casts batches on entry. Features are not
//! normalized here.

use std::collections::BTreeSet;
use std::path::Path;

use rand_chacha::rand_core::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::hash::Fnv1a;
use crate::seeds::{rng, Stream};
use crate::tensor::{Real, Tensor};

/// One labeled feature vector.
#[derive(Debug, Clone)]
pub struct Sample {
    pub features: Tensor<f64>,
    pub label: usize,
}

impl Sample {
    pub fn new(features: Tensor<f64>, label: usize) -> Self {
        Sample { features, label }
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

/// Train/test data for one task.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    task_id: usize,
    classes: Vec<usize>,
    train: Vec<Sample>,
    test: Vec<Sample>,
}

impl TaskDataset {
    /// Validates the task invariants: at least two classes, every label
    /// drawn from the class set, at least two train samples per class
    /// (triplet formation needs a positive), consistent feature dims.
    pub fn new(
        task_id: usize,
        mut classes: Vec<usize>,
        train: Vec<Sample>,
        test: Vec<Sample>,
    ) -> Result<Self> {
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::Data(format!(
                "task {task_id} has {} classes; need at least 2",
                classes.len()
            )));
        }
        let class_set: BTreeSet<usize> = classes.iter().copied().collect();
        let mut dims = BTreeSet::new();
        for s in train.iter().chain(test.iter()) {
            if !class_set.contains(&s.label) {
                return Err(Error::Data(format!(
                    "task {task_id}: sample label {} outside class set",
                    s.label
                )));
            }
            dims.insert(s.dim());
        }
        if dims.len() > 1 {
            return Err(Error::Data(format!(
                "task {task_id}: inconsistent feature dims {dims:?}"
            )));
        }
        for &c in &classes {
            let n = train.iter().filter(|s| s.label == c).count();
            if n < 2 {
                return Err(Error::Data(format!(
                    "task {task_id}: class {c} has {n} train samples; need at least 2"
                )));
            }
        }
        Ok(TaskDataset {
            task_id,
            classes,
            train,
            test,
        })
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    /// Class ids, sorted ascending.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn train(&self) -> &[Sample] {
        &self.train
    }

    pub fn test(&self) -> &[Sample] {
        &self.test
    }

    pub fn train_count(&self) -> usize {
        self.train.len()
    }

    pub fn dim(&self) -> usize {
        self.train
            .first()
            .map(Sample::dim)
            .expect("validated: every class has train samples")
    }

    /// Stacks the given samples into a batch tensor in `T`.
    pub fn batch_of<T: Real>(samples: &[&Sample]) -> Tensor<T> {
        let dim = samples.first().map(|s| s.dim()).unwrap_or(0);
        let mut data = Vec::with_capacity(samples.len() * dim);
        for s in samples {
            data.extend(s.features.data().iter().map(|&v| T::from_f64(v)));
        }
        Tensor::from_vec(&[samples.len(), dim], data).expect("dims validated at construction")
    }
}

/// Ordered tasks with pairwise-disjoint class sets.
#[derive(Debug, Clone)]
pub struct TaskStream {
    tasks: Vec<TaskDataset>,
    seed: u64,
    dim: usize,
}

impl TaskStream {
    pub fn new(tasks: Vec<TaskDataset>, seed: u64) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Data("stream has no tasks".to_string()));
        }
        let mut seen = BTreeSet::new();
        let mut dims = BTreeSet::new();
        for (i, task) in tasks.iter().enumerate() {
            if task.task_id() != i {
                return Err(Error::Data(format!(
                    "task at position {i} carries id {}",
                    task.task_id()
                )));
            }
            for &c in task.classes() {
                if !seen.insert(c) {
                    return Err(Error::Data(format!(
                        "class {c} appears in more than one task"
                    )));
                }
            }
            dims.insert(task.dim());
        }
        if dims.len() > 1 {
            return Err(Error::Data(format!(
                "tasks disagree on feature dim: {dims:?}"
            )));
        }
        let dim = *dims.iter().next().expect("at least one task");
        Ok(TaskStream { tasks, seed, dim })
    }

    pub fn tasks(&self) -> &[TaskDataset] {
        &self.tasks
    }

    pub fn task(&self, k: usize) -> &TaskDataset {
        &self.tasks[k]
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// All class ids present in tasks `0..=k`, sorted.
    pub fn classes_up_to(&self, k: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.tasks[..=k]
            .iter()
            .flat_map(|t| t.classes().iter().copied())
            .collect();
        out.sort_unstable();
        out
    }

    /// Content fingerprint: covers labels, splits and raw feature bits.
    /// Two streams with equal digests are byte-for-byte the same data.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write_u64(self.tasks.len() as u64);
        for task in &self.tasks {
            h.write_u64(task.task_id() as u64);
            for part in [task.train(), task.test()] {
                h.write_u64(part.len() as u64);
                for s in part {
                    h.write_u64(s.label as u64);
                    for &v in s.features.data() {
                        h.write_f64(v);
                    }
                }
            }
        }
        h.finish()
    }
}

/// Splits one class's samples into train/test: the last `max(1, n/5)`
/// samples (in generation or file order) become the test split.
fn split_class(samples: Vec<Sample>) -> (Vec<Sample>, Vec<Sample>) {
    let n = samples.len();
    let test_n = (n / 5).max(1).min(n);
    let mut train = samples;
    let test = train.split_off(n - test_n);
    (train, test)
}

/// Synthetic stream of isotropic Gaussian clusters.
///
/// Class means are drawn uniformly from `[-1, 1]^d` and re-drawn while
/// closer than `4 * cluster_spread` to any accepted mean (at most 100
/// retries each). Task `t` draws its samples from its own RNG stream, so
/// the data of earlier tasks does not depend on how many tasks follow.
pub fn make_synthetic_stream(
    num_tasks: usize,
    classes_per_task: usize,
    samples_per_class: usize,
    input_dim: usize,
    cluster_spread: f64,
    seed: u64,
) -> Result<TaskStream> {
    if num_tasks < 1 || samples_per_class < 1 || input_dim < 1 {
        return Err(Error::Config(
            "num_tasks, samples_per_class and input_dim must all be at least 1".to_string(),
        ));
    }
    if classes_per_task < 2 {
        return Err(Error::Config(format!(
            "classes_per_task must be at least 2 (triplet negatives), got {classes_per_task}"
        )));
    }
    if !(cluster_spread >= 0.0 && cluster_spread.is_finite()) {
        return Err(Error::Config(format!(
            "cluster_spread must be finite and non-negative, got {cluster_spread}"
        )));
    }

    // Stream index 0 is reserved for means; task t samples use index t+1.
    let mut mean_rng = rng(seed, Stream::DataGen, 0);
    let total_classes = num_tasks * classes_per_task;
    let min_sep = 4.0 * cluster_spread;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(total_classes);
    for c in 0..total_classes {
        let mut retries = 0;
        loop {
            let cand: Vec<f64> = (0..input_dim)
                .map(|_| 2.0 * uniform01(&mut mean_rng) - 1.0)
                .collect();
            let ok = means.iter().all(|m| euclidean(m, &cand) >= min_sep);
            if ok {
                means.push(cand);
                break;
            }
            retries += 1;
            if retries > 100 {
                return Err(Error::Data(format!(
                    "could not place a mean for class {c} at separation {min_sep}; \
                     lower cluster_spread or the class count"
                )));
            }
        }
    }

    let normal = StandardNormal;
    let mut tasks = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let mut sample_rng = rng(seed, Stream::DataGen, t as u64 + 1);
        let mut train = Vec::new();
        let mut test = Vec::new();
        let classes: Vec<usize> = (t * classes_per_task..(t + 1) * classes_per_task).collect();
        for &c in &classes {
            let mean = &means[c];
            let samples: Vec<Sample> = (0..samples_per_class)
                .map(|_| {
                    let feats: Vec<f64> = mean
                        .iter()
                        .map(|&m| {
                            let z: f64 = normal.sample(&mut sample_rng);
                            m + cluster_spread * z
                        })
                        .collect();
                    Sample::new(
                        Tensor::from_vec(&[input_dim], feats).expect("finite draws"),
                        c,
                    )
                })
                .collect();
            let (tr, te) = split_class(samples);
            train.extend(tr);
            test.extend(te);
        }
        tasks.push(TaskDataset::new(t, classes, train, test)?);
    }
    TaskStream::new(tasks, seed)
}

fn uniform01(r: &mut impl RngCore) -> f64 {
    // 53 random bits into [0, 1); explicit so the draw sequence is frozen.
    (r.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// In-place Fisher-Yates over a seeded stream.
///
/// Kept as the one and only shuffle in the crate so an external check can
/// re-derive any split: iterate `i` from `len-1` down to 1 and swap `i`
/// with `next_u64() % (i + 1)`.
pub fn seeded_shuffle<E>(items: &mut [E], r: &mut impl RngCore) {
    for i in (1..items.len()).rev() {
        let j = (r.next_u64() % (i as u64 + 1)) as usize;
        items.swap(i, j);
    }
}

/// Loads `label, f_1, ..., f_d` rows and slices the classes into
/// `num_tasks` groups.
///
/// Classes are shuffled by the seeded Fisher-Yates above and grouped in
/// shuffled order; when the class count is not divisible by `num_tasks`,
/// earlier tasks take one extra class each. Per class, the last
/// `max(1, n/5)` rows in file order become the test split.
pub fn load_feature_csv(
    path: &Path,
    num_tasks: usize,
    seed: u64,
    has_header: bool,
) -> Result<TaskStream> {
    if num_tasks < 1 {
        return Err(Error::Config("num_tasks must be at least 1".to_string()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;

    let mut dim: Option<usize> = None;
    let mut by_class: std::collections::BTreeMap<usize, Vec<Sample>> = Default::default();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Format {
            line: e
                .position()
                .map(|p| p.line() as usize)
                .unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(0);
        if record.len() < 2 {
            return Err(Error::Format {
                line,
                msg: format!("need a label and at least one feature, got {} fields", record.len()),
            });
        }
        let d = record.len() - 1;
        match dim {
            None => dim = Some(d),
            Some(expect) if expect != d => {
                return Err(Error::Format {
                    line,
                    msg: format!("row has {d} features, previous rows had {expect}"),
                });
            }
            _ => {}
        }
        let label: usize = record[0].parse().map_err(|_| Error::Format {
            line,
            msg: format!("label `{}` is not a non-negative integer", &record[0]),
        })?;
        let mut feats = Vec::with_capacity(d);
        for field in record.iter().skip(1) {
            let v: f64 = field.parse().map_err(|_| Error::Format {
                line,
                msg: format!("feature `{field}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Format {
                    line,
                    msg: format!("non-finite feature {v}"),
                });
            }
            feats.push(v);
        }
        let dim = dim.expect("set above");
        by_class
            .entry(label)
            .or_default()
            .push(Sample::new(Tensor::from_vec(&[dim], feats)?, label));
    }

    let mut classes: Vec<usize> = by_class.keys().copied().collect();
    if classes.len() < 2 * num_tasks {
        return Err(Error::Data(format!(
            "{} classes cannot fill {num_tasks} tasks with at least 2 classes each",
            classes.len()
        )));
    }
    let mut shuffle_rng = rng(seed, Stream::ClassShuffle, 0);
    seeded_shuffle(&mut classes, &mut shuffle_rng);

    let base = classes.len() / num_tasks;
    let remainder = classes.len() % num_tasks;
    let mut tasks = Vec::with_capacity(num_tasks);
    let mut cursor = 0usize;
    for t in 0..num_tasks {
        let take = base + usize::from(t < remainder);
        let group: Vec<usize> = classes[cursor..cursor + take].to_vec();
        cursor += take;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &group {
            let samples = by_class.get(&c).expect("class key from map").clone();
            let (tr, te) = split_class(samples);
            if tr.len() < 2 {
                return Err(Error::Data(format!(
                    "class {c} has only {} train samples after the 80/20 split; need at least 2",
                    tr.len()
                )));
            }
            train.extend(tr);
            test.extend(te);
        }
        tasks.push(TaskDataset::new(t, group, train, test)?);
    }
    TaskStream::new(tasks, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_rejects_single_class_tasks() {
        assert!(make_synthetic_stream(2, 1, 10, 4, 0.1, 1).is_err());
    }

    #[test]
    fn zero_spread_collapses_to_means() {
        let s = make_synthetic_stream(1, 2, 10, 4, 0.0, 7).unwrap();
        let task = s.task(0);
        for c in task.classes() {
            let feats: Vec<&Sample> = task
                .train()
                .iter()
                .chain(task.test().iter())
                .filter(|x| x.label == *c)
                .collect();
            assert_eq!(feats.len(), 10);
            let first = feats[0].features.data();
            for f in &feats {
                assert_eq!(f.features.data(), first);
            }
        }
    }

    #[test]
    fn same_seed_reproduces_stream() {
        let a = make_synthetic_stream(3, 2, 12, 6, 0.1, 99).unwrap();
        let b = make_synthetic_stream(3, 2, 12, 6, 0.1, 99).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let c = make_synthetic_stream(3, 2, 12, 6, 0.1, 100).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn class_sets_are_disjoint_and_complete() {
        let s = make_synthetic_stream(10, 10, 5, 3, 0.01, 5).unwrap();
        let mut all = BTreeSet::new();
        for t in s.tasks() {
            for &c in t.classes() {
                assert!(all.insert(c), "class {c} repeated");
            }
        }
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn split_sizes_follow_80_20_rule() {
        let s = make_synthetic_stream(1, 2, 10, 4, 0.1, 3).unwrap();
        let task = s.task(0);
        assert_eq!(task.train().len(), 16); // 8 per class
        assert_eq!(task.test().len(), 4); // 2 per class
    }

    #[test]
    fn early_tasks_keep_their_data_when_stream_grows() {
        let short = make_synthetic_stream(2, 2, 8, 4, 0.05, 11).unwrap();
        let long = make_synthetic_stream(4, 2, 8, 4, 0.05, 11).unwrap();
        for t in 0..2 {
            let a = &short.task(t).train()[0];
            let b = &long.task(t).train()[0];
            assert_eq!(a.features.data(), b.features.data());
        }
    }

    #[test]
    fn impossible_separation_reports_data_error() {
        // 100 well-separated means cannot fit in [-1,1]^1 with spread 0.5.
        let err = make_synthetic_stream(10, 10, 5, 1, 0.5, 1).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "got {err:?}");
    }

    #[test]
    fn dataset_rejects_thin_classes() {
        let s = |label| Sample::new(Tensor::from_vec(&[1], vec![0.0]).unwrap(), label);
        let err = TaskDataset::new(0, vec![0, 1], vec![s(0), s(0), s(1)], vec![]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }
}
