//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! Values are recorded on a [`Tape`] as they are computed; [`Tape::backward`]
//! then walks the tape in reverse and returns [`Gradients`] for every node that
//! depends on a trainable leaf. Only the operations the model needs are
//! provided, including grouped-edge primitives for neighbor attention.

mod checkpoint;
mod gradcheck;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use gradcheck::{
    finite_difference_check, relative_error, GradCheckConfig, GradCheckReport, TensorReport,
};
pub use tape::{EdgeIndex, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank >= {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("mask entries must be 0 or -inf, found {0}")]
    MaskValue(f64),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
