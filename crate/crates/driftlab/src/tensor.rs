//! Dense row-major tensors over a configurable float width.
//!
//! Everything downstream (networks, losses, prototypes) is built on
//! [`Tensor`]. Tests and gradient checks instantiate with `f64`; experiment
//! runs may pick `f32` through the run configuration. Exposed operations
//! keep the invariant that every stored value is finite.

use std::fmt::{Debug, Display};

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar type driving all numeric work. Implemented for `f32` and `f64`.
pub trait Real:
    Float
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::iter::Sum
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Float width tag carried by snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Dense tensor with row-major storage.
///
/// Rank is almost always 1 (a vector) or 2 (a batch of rows); the shape is
/// kept as a list so both share one type.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "from_vec",
                format!("zero dimension in shape {shape:?}"),
            ));
        }
        if data.len() != expect {
            return Err(Error::shape(
                "from_vec",
                format!("shape {shape:?} needs {expect} values, got {}", data.len()),
            ));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data,
        };
        t.check_finite("from_vec")?;
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a 2-d batch; a vector counts as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Row width when viewed as a 2-d batch.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Reinterprets a vector as a single-row matrix; 2-d tensors pass through.
    pub fn as_batch(&self) -> Tensor<T> {
        if self.shape.len() == 1 {
            Tensor {
                shape: vec![1, self.shape[0]],
                data: self.data.clone(),
            }
        } else {
            self.clone()
        }
    }

    pub fn check_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::non_finite(op))
        }
    }

    /// Matrix product of two 2-d tensors.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, rhs.shape),
            ));
        }
        let (n, k, m) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let lrow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * m..(i + 1) * m];
            for (p, &l) in lrow.iter().enumerate() {
                let rrow = &rhs.data[p * m..(p + 1) * m];
                for (o, &r) in orow.iter_mut().zip(rrow.iter()) {
                    *o = *o + l * r;
                }
            }
        }
        let t = Tensor {
            shape: vec![n, m],
            data: out,
        };
        t.check_finite("matmul")?;
        Ok(t)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, rhs: &Tensor<T>, op: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape != rhs.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, rhs.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(rhs.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(rhs, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Squared Euclidean distance between two equal-length slices.
    pub fn sq_dist(a: &[T], b: &[T]) -> T {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = T::zero();
        for (&x, &y) in a.iter().zip(b.iter()) {
            let d = x - y;
            acc = acc + d * d;
        }
        acc
    }

    /// L2-normalizes each row in place. Rows with norm below `1e-12` are left
    /// untouched so a zero embedding stays zero instead of becoming NaN.
    pub fn l2_normalize_rows(&self) -> Tensor<T> {
        let mut out = self.clone();
        let cols = out.cols();
        let eps = T::from_f64(1e-12);
        for i in 0..out.rows() {
            let row = &mut out.data[i * cols..(i + 1) * cols];
            let norm = row
                .iter()
                .fold(T::zero(), |acc, &v| acc + v * v)
                .sqrt();
            if norm > eps {
                for v in row.iter_mut() {
                    *v = *v / norm;
                }
            }
        }
        out
    }

    /// Converts element-wise; used when moving between check precision and
    /// run precision at module boundaries.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64_lossy()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_shape() {
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::from_vec(&[0], vec![]).is_err());
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        let err = Tensor::<f64>::from_vec(&[2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn matmul_small_case() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![5.0, 6.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn normalize_rows_unit_norm() {
        let t = Tensor::from_vec(&[2, 2], vec![3.0, 4.0, 0.0, 2.0]).unwrap();
        let n = t.l2_normalize_rows();
        for i in 0..2 {
            let norm: f64 = n.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_zero_row_stays_zero() {
        let t = Tensor::from_vec(&[1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let n = t.l2_normalize_rows();
        assert_eq!(n.data(), &[0.0, 0.0, 0.0]);
    }
}
