//! Layer-wise forward and backward passes.
//!
//! Every layer is a pair of free functions sharing a [`LayerCache`]: the
//! forward pass records what the backward pass needs, and the backward pass
//! consumes it. Spatial layers accept either a single `H×W×C` sample or an
//! `N×H×W×C` batch; dense layers accept an `N`-vector or a `B×N` batch.

mod activation;
mod conv;
mod dense;
mod loss;
mod pool;

pub use activation::{dropout, dropout_backward, relu, relu_backward};
pub use conv::{conv2d_backward, conv2d_forward, ConvGradients};
pub use dense::{dense_backward, dense_forward, DenseGradients};
pub use loss::{softmax, softmax_cross_entropy, softmax_cross_entropy_batch};
pub use pool::{maxpool2x2_forward, maxpool_backward, pooled_extent};

pub(crate) use conv::{conv2d_backward_inner, conv2d_forward_owned, conv_input_relevance};
pub(crate) use dense::dense_forward_owned;

use crate::tensor::{Float, Tensor, TensorError};

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    MaxPool,
    Dense,
    Relu,
    Dropout,
}

/// State recorded by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache<T: Float = f32> {
    state: CacheState<T>,
}

#[derive(Debug, Clone)]
enum CacheState<T: Float> {
    Empty,
    Conv {
        input: Tensor<T>,
    },
    Pool {
        input_shape: Vec<usize>,
        winners: Vec<usize>,
    },
    Dense {
        input: Tensor<T>,
    },
    Relu {
        active: Vec<bool>,
        shape: Vec<usize>,
    },
    Dropout {
        mask: Option<Vec<T>>,
        shape: Vec<usize>,
    },
}

impl<T: Float> Default for LayerCache<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> LayerCache<T> {
    pub fn new() -> Self {
        Self {
            state: CacheState::Empty,
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self.state, CacheState::Empty)
    }

    pub fn kind(&self) -> Option<LayerKind> {
        match self.state {
            CacheState::Empty => None,
            CacheState::Conv { .. } => Some(LayerKind::Conv2d),
            CacheState::Pool { .. } => Some(LayerKind::MaxPool),
            CacheState::Dense { .. } => Some(LayerKind::Dense),
            CacheState::Relu { .. } => Some(LayerKind::Relu),
            CacheState::Dropout { .. } => Some(LayerKind::Dropout),
        }
    }

    /// Flat input indices that won each pooling window.
    pub fn pool_winners(&self) -> Option<&[usize]> {
        match &self.state {
            CacheState::Pool { winners, .. } => Some(winners),
            _ => None,
        }
    }

    /// Inverted-dropout multipliers; `None` when the layer acted as identity.
    pub fn dropout_mask(&self) -> Option<&[T]> {
        match &self.state {
            CacheState::Dropout { mask, .. } => mask.as_deref(),
            _ => None,
        }
    }

    /// Input recorded by a conv or dense forward pass.
    pub fn cached_input(&self) -> Option<&Tensor<T>> {
        match &self.state {
            CacheState::Conv { input } | CacheState::Dense { input } => Some(input),
            _ => None,
        }
    }

    fn take(&mut self) -> CacheState<T> {
        std::mem::replace(&mut self.state, CacheState::Empty)
    }

    fn set(&mut self, state: CacheState<T>) {
        self.state = state;
    }
}

pub(crate) fn stale(layer: &'static str) -> TensorError {
    TensorError::StaleCache(layer)
}

/// Splits a spatial tensor shape into `(batch, h, w, c, batched)`.
pub(crate) fn spatial_dims(
    shape: &[usize],
) -> Result<(usize, usize, usize, usize, bool), TensorError> {
    match *shape {
        [h, w, c] => Ok((1, h, w, c, false)),
        [n, h, w, c] => Ok((n, h, w, c, true)),
        _ => Err(TensorError::InvalidArgument(format!(
            "expected H×W×C or N×H×W×C input, got shape {shape:?}"
        ))),
    }
}

pub(crate) fn spatial_shape(n: usize, h: usize, w: usize, c: usize, batched: bool) -> Vec<usize> {
    if batched {
        vec![n, h, w, c]
    } else {
        vec![h, w, c]
    }
}
