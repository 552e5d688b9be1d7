//! Continual metric-learning laboratory.
//!
//! The crate trains a small embedding network over a stream of disjoint
//! classification tasks and measures how accuracy on earlier tasks decays
//! as later ones are learned. Old-task data is never revisited; what
//! survives a task boundary is the model itself, per-class embedding
//! prototypes, and optionally an importance map over parameters.
//!
//! Three families of countermeasures are implemented on top of a shared
//! training loop:
//!
//! - penalty regularizers that anchor the new model to the old one
//!   (output distillation and two parameter-importance schemes),
//! - prototype memory with nearest-class-mean classification,
//! - a pair of residual translation networks trained at each task
//!   boundary that map old and current embeddings into a shared space,
//!   letting stored prototypes stay comparable with fresh embeddings.
//!
//! Everything is driven from [`experiment`], which wires the pieces into
//! a reproducible benchmark: one master seed, per-phase RNG streams, and
//! byte-stable result files.

pub mod embedding;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod hash;
pub mod net;
pub mod optim;
pub mod params;
pub mod regularizer;
pub mod report;
pub mod seeds;
pub mod snapshot;
pub mod stream;
pub mod tensor;
pub mod translation;

pub use error::{Error, Result};
pub use params::{GradRecord, ParamSet};
pub use tensor::{Dtype, Real, Tensor};
