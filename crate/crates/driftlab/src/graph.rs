//! Reverse-mode gradient evaluation over a fixed operator set.
//!
//! Losses are built as expression graphs with eagerly evaluated forward
//! values; [`Graph::backward`] then walks the tape in reverse and
//! accumulates exact adjoints into a [`GradRecord`]. The operator set is
//! deliberately small: matrix product, bias add, element-wise arithmetic,
//! rectifier/tanh, absolute value, square, guarded square root, row
//! normalization, row gather and reductions. Every loss in this crate
//! composes from these; there is no general tape for arbitrary code.
//!
//! Conventions baked in here:
//! - `max(0, x)` has subgradient 0 at exactly 0 (shared by the rectifier
//!   activation and the hinge in triplet losses);
//! - `sqrt` at 0 has subgradient 0;
//! - `|x|` at 0 has subgradient 0;
//! - row normalization leaves rows of near-zero norm untouched and passes
//!   their gradient through unchanged.

use crate::error::{Error, Result};
use crate::params::{GradRecord, ParamSet};
use crate::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy)]
enum MapOp {
    Relu,
    Tanh,
    Abs,
    Square,
    SafeSqrt,
}

impl MapOp {
    fn name(self) -> &'static str {
        match self {
            MapOp::Relu => "relu",
            MapOp::Tanh => "tanh",
            MapOp::Abs => "abs",
            MapOp::Square => "square",
            MapOp::SafeSqrt => "sqrt",
        }
    }

    fn forward<T: Real>(self, x: T) -> T {
        match self {
            MapOp::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            MapOp::Tanh => x.tanh(),
            MapOp::Abs => x.abs(),
            MapOp::Square => x * x,
            MapOp::SafeSqrt => {
                if x > T::zero() {
                    x.sqrt()
                } else {
                    T::zero()
                }
            }
        }
    }

    /// Local derivative given input `x` and forward output `y`.
    fn backward<T: Real>(self, x: T, y: T) -> T {
        match self {
            MapOp::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            MapOp::Tanh => T::one() - y * y,
            MapOp::Abs => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            MapOp::Square => (T::one() + T::one()) * x,
            MapOp::SafeSqrt => {
                if x > T::zero() {
                    T::one() / ((T::one() + T::one()) * y)
                } else {
                    T::zero()
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Param(usize),
    Constant,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Map(NodeId, MapOp),
    NormalizeRows(NodeId),
    GatherRows(NodeId, Vec<usize>),
    SumAll(NodeId),
    SumRows(NodeId),
}

struct Node<T: Real> {
    op: Op,
    value: Tensor<T>,
}

/// Expression tape over one parameter set.
pub struct Graph<'p, T: Real> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    fn push(&mut self, op: Op, value: Tensor<T>, name: &str) -> Result<NodeId> {
        value.check_finite(name)?;
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<T> {
        let v = self.value(id);
        if v.len() != 1 {
            return Err(Error::shape(
                "scalar_value",
                format!("expected scalar, got shape {:?}", v.shape()),
            ));
        }
        Ok(v.data()[0])
    }

    /// Tracked leaf: a named parameter from the underlying set.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        if let Some(id) = self.param_nodes[idx] {
            return Ok(id);
        }
        let value = self.params.by_index(idx).1.clone();
        let id = self.push(Op::Param(idx), value, "param")?;
        self.param_nodes[idx] = Some(id);
        Ok(id)
    }

    /// Untracked leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(Op::Constant, value, "constant")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), value, "matmul")
    }

    /// Adds a bias row vector to every row of a 2-d tensor.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.shape().len() != 1 || xv.cols() != bv.len() {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + bias {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(bv.data().iter()) {
                *o += b;
            }
        }
        self.push(Op::AddBias(x, bias), out, "add_bias")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        self.push(Op::Add(a, b), value, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        self.push(Op::Sub(a, b), value, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), value, "mul")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let cv = T::from_f64(c);
        let value = self.value(x).scale(cv);
        self.push(Op::Scale(x, c), value, "scale")
    }

    pub fn offset(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let cv = T::from_f64(c);
        let value = self.value(x).map(|v| v + cv);
        self.push(Op::Offset(x), value, "offset")
    }

    fn map(&mut self, x: NodeId, op: MapOp) -> Result<NodeId> {
        let value = self.value(x).map(|v| op.forward(v));
        self.push(Op::Map(x, op), value, op.name())
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, MapOp::Relu)
    }

    /// `max(0, x)` — same kernel as the rectifier, named for loss code.
    pub fn hinge(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, MapOp::Relu)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, MapOp::Tanh)
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, MapOp::Abs)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, MapOp::Square)
    }

    pub fn safe_sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, MapOp::SafeSqrt)
    }

    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).l2_normalize_rows();
        self.push(Op::NormalizeRows(x), value, "normalize_rows")
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let xv = self.value(x);
        let n = xv.rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape(
                "gather_rows",
                format!("row index {bad} out of range for {n} rows"),
            ));
        }
        let cols = xv.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in &rows {
            data.extend_from_slice(xv.row(r));
        }
        let value = Tensor::from_vec(&[rows.len(), cols], data)?;
        self.push(Op::GatherRows(x, rows), value, "gather_rows")
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::SumAll(x), value, "sum_all")
    }

    /// Row sums of a 2-d tensor; output shape `[rows]`.
    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let data: Vec<T> = (0..xv.rows())
            .map(|i| xv.row(i).iter().copied().sum())
            .collect();
        let value = Tensor::from_vec(&[xv.rows()], data)?;
        self.push(Op::SumRows(x), value, "sum_rows")
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse pass from a scalar loss node.
    ///
    /// Returns gradients shaped one-to-one with the parameter set;
    /// parameters the loss never touched get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<GradRecord<T>> {
        let loss_value = self.scalar_value(loss)?;
        if !loss_value.is_finite() {
            return Err(Error::non_finite("loss"));
        }

        let mut adjoint: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoint[loss.0] = Some(Tensor::scalar(T::one()));

        let mut record = GradRecord::zeros_like(self.params);
        record.loss = loss_value;

        for idx in (0..self.nodes.len()).rev() {
            let g = match adjoint[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Param(pidx) => {
                    let (name, _) = self.params.by_index(*pidx);
                    let name = name.to_string();
                    let acc = record
                        .grads_mut()
                        .get(&name)
                        .expect("grad layout mirrors params")
                        .add(&g)?;
                    record.grads_mut().set(&name, acc)?;
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    // dA = g @ B^T
                    let (n, k) = (av.shape()[0], av.shape()[1]);
                    let m = bv.shape()[1];
                    let mut da = vec![T::zero(); n * k];
                    for i in 0..n {
                        for p in 0..k {
                            let mut acc = T::zero();
                            for j in 0..m {
                                acc += g.data()[i * m + j] * bv.data()[p * m + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    // dB = A^T @ g
                    let mut db = vec![T::zero(); k * m];
                    for p in 0..k {
                        for j in 0..m {
                            let mut acc = T::zero();
                            for i in 0..n {
                                acc += av.data()[i * k + p] * g.data()[i * m + j];
                            }
                            db[p * m + j] = acc;
                        }
                    }
                    self.accumulate(&mut adjoint, *a, Tensor::from_vec(&[n, k], da)?)?;
                    self.accumulate(&mut adjoint, *b, Tensor::from_vec(&[k, m], db)?)?;
                }
                Op::AddBias(x, bias) => {
                    let cols = g.cols();
                    let mut db = vec![T::zero(); cols];
                    for i in 0..g.rows() {
                        for (acc, &v) in db.iter_mut().zip(g.row(i).iter()) {
                            *acc += v;
                        }
                    }
                    self.accumulate(&mut adjoint, *x, g.clone())?;
                    self.accumulate(&mut adjoint, *bias, Tensor::from_vec(&[cols], db)?)?;
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut adjoint, *a, g.clone())?;
                    self.accumulate(&mut adjoint, *b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adjoint, *a, g.clone())?;
                    self.accumulate(&mut adjoint, *b, g.scale(-T::one()))?;
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), "mul_bwd", |x, y| x * y)?;
                    let gb = g.zip_map(self.value(*a), "mul_bwd", |x, y| x * y)?;
                    self.accumulate(&mut adjoint, *a, ga)?;
                    self.accumulate(&mut adjoint, *b, gb)?;
                }
                Op::Scale(x, c) => {
                    self.accumulate(&mut adjoint, *x, g.scale(T::from_f64(*c)))?;
                }
                Op::Offset(x) => {
                    self.accumulate(&mut adjoint, *x, g)?;
                }
                Op::Map(x, op) => {
                    let xv = self.value(*x);
                    let yv = &node.value;
                    let gx = Tensor::from_vec(
                        xv.shape(),
                        xv.data()
                            .iter()
                            .zip(yv.data().iter())
                            .zip(g.data().iter())
                            .map(|((&xi, &yi), &gi)| gi * op.backward(xi, yi))
                            .collect(),
                    )?;
                    self.accumulate(&mut adjoint, *x, gx)?;
                }
                Op::NormalizeRows(x) => {
                    let xv = self.value(*x);
                    let yv = &node.value;
                    let eps = T::from_f64(1e-12);
                    let cols = xv.cols();
                    let mut gx = vec![T::zero(); xv.len()];
                    for i in 0..xv.rows() {
                        let zin = xv.row(i);
                        let u = yv.row(i);
                        let grow = g.row(i);
                        let norm = zin
                            .iter()
                            .fold(T::zero(), |acc, &v| acc + v * v)
                            .sqrt();
                        let out = &mut gx[i * cols..(i + 1) * cols];
                        if norm > eps {
                            let dot = grow
                                .iter()
                                .zip(u.iter())
                                .fold(T::zero(), |acc, (&gi, &ui)| acc + gi * ui);
                            for ((o, &gi), &ui) in out.iter_mut().zip(grow.iter()).zip(u.iter()) {
                                *o = (gi - dot * ui) / norm;
                            }
                        } else {
                            out.copy_from_slice(grow);
                        }
                    }
                    self.accumulate(&mut adjoint, *x, Tensor::from_vec(xv.shape(), gx)?)?;
                }
                Op::GatherRows(x, rows) => {
                    let xv = self.value(*x);
                    let cols = xv.cols();
                    let mut gx = vec![T::zero(); xv.len()];
                    for (out_row, &src) in rows.iter().enumerate() {
                        let grow = g.row(out_row);
                        let dst = &mut gx[src * cols..(src + 1) * cols];
                        for (d, &v) in dst.iter_mut().zip(grow.iter()) {
                            *d += v;
                        }
                    }
                    self.accumulate(&mut adjoint, *x, Tensor::from_vec(xv.shape(), gx)?)?;
                }
                Op::SumAll(x) => {
                    let xv = self.value(*x);
                    let s = g.data()[0];
                    self.accumulate(&mut adjoint, *x, Tensor::from_vec(xv.shape(), vec![s; xv.len()])?)?;
                }
                Op::SumRows(x) => {
                    let xv = self.value(*x);
                    let cols = xv.cols();
                    let mut gx = vec![T::zero(); xv.len()];
                    for i in 0..xv.rows() {
                        let gi = g.data()[i];
                        for v in &mut gx[i * cols..(i + 1) * cols] {
                            *v = gi;
                        }
                    }
                    self.accumulate(&mut adjoint, *x, Tensor::from_vec(xv.shape(), gx)?)?;
                }
            }
        }

        for (name, t) in record.grads().iter() {
            t.check_finite(&format!("grad[{name}]"))?;
        }
        Ok(record)
    }

    fn accumulate(
        &self,
        adjoint: &mut [Option<Tensor<T>>],
        target: NodeId,
        grad: Tensor<T>,
    ) -> Result<()> {
        match &mut adjoint[target.0] {
            Some(existing) => {
                *existing = existing.add(&grad)?;
            }
            slot @ None => {
                *slot = Some(grad);
            }
        }
        Ok(())
    }
}

/// Builds a loss expression over `params` and returns its value together
/// with exact gradients for every parameter.
pub fn grad<'p, T: Real, F>(params: &'p ParamSet<T>, build: F) -> Result<GradRecord<T>>
where
    F: FnOnce(&mut Graph<'p, T>) -> Result<NodeId>,
{
    let mut graph = Graph::new(params);
    let loss = build(&mut graph)?;
    graph.backward(loss)
}
