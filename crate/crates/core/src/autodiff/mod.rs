//! A small reverse-mode differentiation engine over dense `f64` tensors.
//!
//! Forward ops append nodes to a [`Graph`] tape; [`Graph::backward`] walks
//! the tape once in reverse. Trainable tensors live in a [`ParamStore`]
//! that the graph borrows, and [`Adam`] updates them in place from the
//! accumulated gradients.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

use thiserror::Error;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{gradient_check, GradCheck, HasParams};
pub use graph::{Graph, Var, MASK_VALUE};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient {value} in parameter `{name}` at entry {entry}")]
    NonFiniteGradient { name: String, entry: usize, value: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AutodiffError {
    pub(crate) fn shape(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Self {
        Self::Shape {
            op,
            lhs: lhs.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        }
    }
}
