//! The SewerNet classifier: architecture, prediction and checkpoints.

mod arch;
pub mod checkpoint;
mod network;

pub use arch::{Activation, ArchitectureSpec, LayerSpec, LayerSummary};
pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, CheckpointError, CheckpointMetadata,
};
pub use network::{build_sewernet, Classifier, ForwardTrace, Layer, Network, Prediction};

pub(crate) use network::digest_bytes;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("input shape {actual:?} does not match expected {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
