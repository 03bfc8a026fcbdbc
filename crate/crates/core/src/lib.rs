//! Sewer obstruction grading.
//!
//! The crate covers the whole offline path from inspection footage to an
//! explained, evaluated classifier:
//!
//! - [`tensor`], [`nn`] and [`optim`]: a small dense-tensor kernel with
//!   explicit layer-wise forward/backward passes and Adam.
//! - [`model`]: the fixed SewerNet architecture, prediction and checkpoints.
//! - [`frames`]: stable-segment detection and frame preprocessing.
//! - [`dataset`]: label merging, balancing, video-level splits and a
//!   procedural synthetic-sewer generator.
//! - [`train`]: the optimization loop.
//! - [`lrp`]: layer-wise relevance propagation and heatmap rendering.
//! - [`eval`]: confusion matrices, the voting video classifier and reports.
//! - [`gradcheck`]: finite-difference verification of the backward passes.

pub mod dataset;
pub mod eval;
pub mod frames;
pub mod gradcheck;
pub mod lrp;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use tensor::{Float, Tensor, TensorError};

/// Number of obstruction classes the network predicts.
pub const NUM_CLASSES: usize = 4;
