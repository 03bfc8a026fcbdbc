use rand::Rng;

use super::{stale, CacheState, LayerCache, Mode};
use crate::tensor::{Float, Tensor, TensorError};

pub fn relu<T: Float>(
    input: &Tensor<T>,
    cache: &mut LayerCache<T>,
) -> Result<Tensor<T>, TensorError> {
    let active: Vec<bool> = input.data().iter().map(|&v| v > T::zero()).collect();
    let out = input.map(|v| if v > T::zero() { v } else { T::zero() });
    cache.set(CacheState::Relu {
        active,
        shape: input.shape().to_vec(),
    });
    Ok(out)
}

pub fn relu_backward<T: Float>(
    grad_out: &Tensor<T>,
    cache: &mut LayerCache<T>,
) -> Result<Tensor<T>, TensorError> {
    let CacheState::Relu { active, shape } = cache.take() else {
        return Err(stale("relu"));
    };
    grad_out.expect_shape(&shape)?;
    let data = grad_out
        .data()
        .iter()
        .zip(&active)
        .map(|(&g, &on)| if on { g } else { T::zero() })
        .collect();
    Tensor::new(shape, data)
}

/// Inverted dropout: in training each unit is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`; evaluation is the
/// identity.
pub fn dropout<T: Float, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
    cache: &mut LayerCache<T>,
) -> Result<Tensor<T>, TensorError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::InvalidArgument(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    let shape = input.shape().to_vec();
    if mode == Mode::Eval || rate == 0.0 {
        cache.set(CacheState::Dropout { mask: None, shape });
        return Ok(input.clone());
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..input.len())
        .map(|_| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    let data = input
        .data()
        .iter()
        .zip(&mask)
        .map(|(&x, &m)| x * m)
        .collect();
    cache.set(CacheState::Dropout {
        mask: Some(mask),
        shape: shape.clone(),
    });
    Tensor::new(shape, data)
}

pub fn dropout_backward<T: Float>(
    grad_out: &Tensor<T>,
    cache: &mut LayerCache<T>,
) -> Result<Tensor<T>, TensorError> {
    let CacheState::Dropout { mask, shape } = cache.take() else {
        return Err(stale("dropout"));
    };
    grad_out.expect_shape(&shape)?;
    match mask {
        None => Ok(grad_out.clone()),
        Some(mask) => {
            let data = grad_out
                .data()
                .iter()
                .zip(&mask)
                .map(|(&g, &m)| g * m)
                .collect();
            Tensor::new(shape, data)
        }
    }
}
