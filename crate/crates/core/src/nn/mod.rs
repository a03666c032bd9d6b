//! Small deterministic differentiable-network engine.
//!
//! Values live in [`Tensor`]s, a forward pass is recorded on a [`Tape`], and
//! [`Tape::backward`] returns gradients for every recorded node. Only the
//! layer kinds in [`LayerSpec`] are supported.

mod adam;
mod checkpoint;
mod gradcheck;
mod layers;
pub mod ops;
mod rng;
mod tape;
mod tensor;

pub use adam::{Adam, AdamState};
pub use checkpoint::{Checkpoint, CheckpointHeader, TensorEntry, CHECKPOINT_SCHEMA};
pub use gradcheck::{check_function, check_function_sampled, grad_check, grad_check_report, one_hot, project_to_scalar, relative_error, GradCheckReport};
pub use layers::LayerSpec;
pub use ops::{LossKind, Mode};
pub use rng::Rng;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
    #[error("backward called before any forward pass was recorded")]
    EmptyTape,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint schema version {found} (expected {expected})")]
    Schema { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
