//! Fully connected networks used for both the embedding backbone and the
//! translation residuals.
//!
//! A net is its layer dimensions, one hidden activation, and a named
//! parameter set (`w0`, `b0`, `w1`, ...). The output layer is always
//! linear; squashing the final embedding is a separate, optional
//! normalization step owned by the caller. Forward passes run through
//! [`Graph`] so the same code path serves inference and training.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamSet;
use crate::tensor::{Real, Tensor};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    /// No nonlinearity anywhere; the net is a chain of affine maps.
    Identity,
}

/// Weight initialization scheme. Biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`; pairs with `Relu`.
    He,
    /// Uniform in ±`sqrt(6 / (fan_in + fan_out))`; pairs with `Tanh`.
    Xavier,
    Zeros,
}

/// Multi-layer perceptron with named parameters.
#[derive(Debug, Clone)]
pub struct MlpNet<T: Real> {
    dims: Vec<usize>,
    activation: Activation,
    params: ParamSet<T>,
}

impl<T: Real> MlpNet<T> {
    /// Builds a net with layer sizes `dims[0] -> dims[1] -> ...`.
    ///
    /// Weight draws happen in f64 regardless of `T`, so an f32 and an f64
    /// net from the same RNG state start at the same (rounded) weights.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        activation: Activation,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!(
                "network needs at least input and output dims, got {dims:?}"
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("zero-width layer in dims {dims:?}")));
        }
        let mut params = ParamSet::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let mut w = vec![0.0f64; fan_in * fan_out];
            match init {
                Init::He => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    let dist = Normal::new(0.0, std).expect("std is finite and positive");
                    for v in &mut w {
                        *v = dist.sample(rng);
                    }
                }
                Init::Xavier => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    for v in &mut w {
                        *v = bound * (2.0 * rng.random::<f64>() - 1.0);
                    }
                }
                Init::Zeros => {}
            }
            let w = Tensor::from_vec(&[fan_in, fan_out], w.into_iter().map(T::from_f64).collect())?;
            params.add(format!("w{l}"), w)?;
            params.add(format!("b{l}"), Tensor::zeros(&[fan_out]))?;
        }
        Ok(MlpNet {
            dims: dims.to_vec(),
            activation,
            params,
        })
    }

    /// Rebuilds a net from a serialized parameter set. Expects the
    /// layout `w0, b0, w1, b1, ...` and derives the layer dims from it.
    pub fn from_params(activation: Activation, params: ParamSet<T>) -> Result<Self> {
        if params.len() < 2 || params.len() % 2 != 0 {
            return Err(Error::Snapshot(format!(
                "expected pairs of weight/bias tensors, got {} tensors",
                params.len()
            )));
        }
        let layers = params.len() / 2;
        let mut dims = Vec::with_capacity(layers + 1);
        for l in 0..layers {
            let w = params
                .get(&format!("w{l}"))
                .ok_or_else(|| Error::Snapshot(format!("missing tensor w{l}")))?;
            let b = params
                .get(&format!("b{l}"))
                .ok_or_else(|| Error::Snapshot(format!("missing tensor b{l}")))?;
            if w.shape().len() != 2 || b.shape().len() != 1 || w.shape()[1] != b.shape()[0] {
                return Err(Error::Snapshot(format!(
                    "layer {l} has inconsistent shapes {:?} / {:?}",
                    w.shape(),
                    b.shape()
                )));
            }
            if l == 0 {
                dims.push(w.shape()[0]);
            } else if dims[l] != w.shape()[0] {
                return Err(Error::Snapshot(format!(
                    "layer {l} input dim {} does not chain from previous output {}",
                    w.shape()[0],
                    dims[l]
                )));
            }
            dims.push(w.shape()[1]);
        }
        Ok(MlpNet {
            dims,
            activation,
            params,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("dims validated non-empty")
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Replaces all parameters; layout must match.
    pub fn set_params(&mut self, params: ParamSet<T>) -> Result<()> {
        if !self.params.same_layout(&params) {
            return Err(Error::shape(
                "set_params",
                "replacement does not match network layout".to_string(),
            ));
        }
        self.params = params;
        Ok(())
    }

    /// Zeroes the final affine layer so the net maps everything to 0.
    ///
    /// A residual `v + net(v)` built on such a net starts as the exact
    /// identity, which is the required initial state for translation
    /// training.
    pub fn zero_output_layer(&mut self) {
        let l = self.layer_count() - 1;
        let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
        self.params
            .set(&format!("w{l}"), Tensor::zeros(&[fan_in, fan_out]))
            .expect("layer exists with this shape");
        self.params
            .set(&format!("b{l}"), Tensor::zeros(&[fan_out]))
            .expect("layer exists with this shape");
    }

    /// Builds the forward pass on an existing graph.
    ///
    /// `prefix` locates this net's parameters inside the graph's set:
    /// empty when the graph was built over `self.params()`, or a section
    /// prefix such as `"cur."` when two nets were merged for joint
    /// training.
    pub fn forward_on(
        &self,
        graph: &mut Graph<'_, T>,
        input: NodeId,
        prefix: &str,
    ) -> Result<NodeId> {
        if graph.value(input).cols() != self.input_dim() {
            return Err(Error::shape(
                "forward",
                format!(
                    "input has {} columns, network expects {}",
                    graph.value(input).cols(),
                    self.input_dim()
                ),
            ));
        }
        let mut h = input;
        for l in 0..self.layer_count() {
            let w = graph.param(&format!("{prefix}w{l}"))?;
            let b = graph.param(&format!("{prefix}b{l}"))?;
            let z = graph.matmul(h, w)?;
            let z = graph.add_bias(z, b)?;
            h = if l + 1 < self.layer_count() {
                match self.activation {
                    Activation::Relu => graph.relu(z)?,
                    Activation::Tanh => graph.tanh(z)?,
                    Activation::Identity => z,
                }
            } else {
                z
            };
        }
        Ok(h)
    }

    /// Plain inference; accepts a single vector or a batch of rows.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = x.as_batch();
        let mut graph = Graph::new(&self.params);
        let input = graph.constant(batch)?;
        let out = self.forward_on(&mut graph, input, "")?;
        Ok(graph.value(out).clone())
    }

    pub fn cast<U: Real>(&self) -> MlpNet<U> {
        MlpNet {
            dims: self.dims.clone(),
            activation: self.activation,
            params: self.params.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::{rng, Stream};

    #[test]
    fn rejects_degenerate_dims() {
        let mut r = rng(1, Stream::EmbedInit, 0);
        assert!(MlpNet::<f64>::new(&[4], Activation::Relu, Init::He, &mut r).is_err());
        assert!(MlpNet::<f64>::new(&[4, 0, 2], Activation::Relu, Init::He, &mut r).is_err());
    }

    #[test]
    fn zero_net_maps_to_zero() {
        let mut r = rng(1, Stream::EmbedInit, 0);
        let net = MlpNet::<f64>::new(&[3, 5, 2], Activation::Relu, Init::Zeros, &mut r).unwrap();
        let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
        let y = net.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_hand_computed_affine() {
        let mut r = rng(1, Stream::EmbedInit, 0);
        let mut net =
            MlpNet::<f64>::new(&[2, 2], Activation::Identity, Init::Zeros, &mut r).unwrap();
        net.params_mut()
            .set("w0", Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        net.params_mut()
            .set("b0", Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap())
            .unwrap();
        let y = net
            .forward(&Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap())
            .unwrap();
        // [1,1] @ [[1,2],[3,4]] + [0.5,-0.5] = [4.5, 5.5]
        assert_eq!(y.data(), &[4.5, 5.5]);
    }

    #[test]
    fn init_is_deterministic_per_stream() {
        let mut r1 = rng(9, Stream::EmbedInit, 0);
        let mut r2 = rng(9, Stream::EmbedInit, 0);
        let a = MlpNet::<f64>::new(&[4, 8, 3], Activation::Relu, Init::He, &mut r1).unwrap();
        let b = MlpNet::<f64>::new(&[4, 8, 3], Activation::Relu, Init::He, &mut r2).unwrap();
        for ((_, ta), (_, tb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn zero_output_layer_keeps_hidden_weights() {
        let mut r = rng(2, Stream::TransitionInit, 0);
        let mut net = MlpNet::<f64>::new(&[3, 6, 3], Activation::Relu, Init::He, &mut r).unwrap();
        let w0_before = net.params().get("w0").unwrap().clone();
        net.zero_output_layer();
        assert_eq!(net.params().get("w0").unwrap().data(), w0_before.data());
        assert!(net.params().get("w1").unwrap().data().iter().all(|&v| v == 0.0));
        let x = Tensor::from_vec(&[3], vec![0.3, -0.7, 1.1]).unwrap();
        let y = net.forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
