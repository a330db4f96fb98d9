//! Dense tensors and a small reverse-mode tape.
//!
//! The tape records a closed set of operations (the ones the Siamese network
//! needs) and differentiates through them in reverse creation order. Node ids
//! are handed out in creation order, so that order is already topological.
//!
//! Activations are laid out as `(batch, channels, width)`, row-major.

mod checkpoint;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{Graph, Mode, NodeId, OpKind};
pub use params::{Gradients, ParamKind, Parameter, ParameterSet, RunningStats};
pub use tensor::{Tensor, Tensor2};

/// Default batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Default momentum for running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
