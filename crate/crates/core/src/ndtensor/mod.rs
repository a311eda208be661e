//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Every trainable piece of the pipeline (image encoder, attention layers,
//! triplane features, decoder, token projection) is a [`Tensor`] leaf held
//! in a [`ParamStore`]. Ops record a backward closure on their output; calling
//! [`Tensor::backward`] walks the graph once in reverse topological order and
//! accumulates gradients into the leaves.
//!
//! Values are `f64`. Checkpoints and optimizer state are stored as `f32`.

mod conv;
mod gradcheck;
mod ops;
mod optim;
mod params;
mod sparse;
mod tensor;

pub use conv::Conv2dSpec;
pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use optim::{cosine_lr, Adam};
pub use params::{round_f32, CheckpointError, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use sparse::SparseMap;
pub use tensor::{BackwardFn, Tensor};


#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("backward needs a single-element root, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value at parameter {tensor}, element {index}")]
    NonFinite { tensor: usize, index: usize },
    #[error("missing parameter {0:?}")]
    MissingParam(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
