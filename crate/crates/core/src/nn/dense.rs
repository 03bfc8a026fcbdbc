use super::{stale, CacheState, LayerCache};
use crate::tensor::{gemm, Float, Op, Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct DenseGradients<T: Float = f32> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Returns `(batch, inputs, outputs, batched)`.
fn dims(
    input: &[usize],
    weights: &[usize],
    bias: &[usize],
) -> Result<(usize, usize, usize, bool), TensorError> {
    let &[n, m] = weights else {
        return Err(TensorError::InvalidArgument(format!(
            "dense weights must be N×M, got {weights:?}"
        )));
    };
    let (b, batched) = match *input {
        [len] if len == n => (1, false),
        [b, len] if len == n => (b, true),
        _ => {
            return Err(TensorError::ShapeMismatch {
                expected: vec![n],
                actual: input.to_vec(),
            })
        }
    };
    if bias != [m] {
        return Err(TensorError::ShapeMismatch {
            expected: vec![m],
            actual: bias.to_vec(),
        });
    }
    Ok((b, n, m, batched))
}

/// Affine map `input · weights + bias` with `weights` laid out `N×M`.
pub fn dense_forward<T: Float>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    cache: &mut LayerCache<T>,
) -> Result<Tensor<T>, TensorError> {
    dense_forward_owned(input.clone(), weights, bias, cache)
}

pub(crate) fn dense_forward_owned<T: Float>(
    input: Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    cache: &mut LayerCache<T>,
) -> Result<Tensor<T>, TensorError> {
    let (b, n, m, batched) = dims(input.shape(), weights.shape(), bias.shape())?;
    let mut out = vec![T::zero(); b * m];
    for row in out.chunks_exact_mut(m) {
        row.copy_from_slice(bias.data());
    }
    gemm(
        b,
        n,
        m,
        T::one(),
        input.data(),
        Op::Plain,
        weights.data(),
        Op::Plain,
        T::one(),
        &mut out,
    );
    cache.set(CacheState::Dense { input });
    let shape = if batched { vec![b, m] } else { vec![m] };
    Tensor::new(shape, out)
}

pub fn dense_backward<T: Float>(
    grad_out: &Tensor<T>,
    weights: &Tensor<T>,
    cache: &mut LayerCache<T>,
) -> Result<DenseGradients<T>, TensorError> {
    let CacheState::Dense { input } = cache.take() else {
        return Err(stale("dense"));
    };
    let m = *weights.shape().last().unwrap_or(&0);
    let (b, n, m, batched) = dims(input.shape(), weights.shape(), &[m])?;
    let expected = if batched { vec![b, m] } else { vec![m] };
    grad_out.expect_shape(&expected)?;

    let g = grad_out.data();
    let mut grad_w = vec![T::zero(); n * m];
    gemm(
        n,
        b,
        m,
        T::one(),
        input.data(),
        Op::Transposed,
        g,
        Op::Plain,
        T::zero(),
        &mut grad_w,
    );
    let mut grad_b = vec![T::zero(); m];
    for row in g.chunks_exact(m) {
        for (acc, &v) in grad_b.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let mut grad_in = vec![T::zero(); b * n];
    gemm(
        b,
        m,
        n,
        T::one(),
        g,
        Op::Plain,
        weights.data(),
        Op::Transposed,
        T::zero(),
        &mut grad_in,
    );
    Ok(DenseGradients {
        input: Tensor::new(input.shape().to_vec(), grad_in)?,
        weights: Tensor::new([n, m], grad_w)?,
        bias: Tensor::new([m], grad_b)?,
    })
}
