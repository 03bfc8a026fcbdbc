use super::{spatial_dims, spatial_shape, stale, CacheState, LayerCache};
use crate::tensor::{Float, Tensor, TensorError};

/// Output extent of a ceil-mode 2×2/stride-2 pooling window over `n` cells.
pub fn pooled_extent(n: usize) -> usize {
    n.div_ceil(2)
}

/// 2×2 max pooling with stride 2 in ceil mode: odd trailing rows/columns
/// form truncated windows, so 75 pools to 38.
///
/// The flat input index of each window's maximum is cached; among equal
/// values the first in row-major window order wins.
pub fn maxpool2x2_forward<T: Float>(
    input: &Tensor<T>,
    cache: &mut LayerCache<T>,
) -> Result<Tensor<T>, TensorError> {
    let (n, h, w, c, batched) = spatial_dims(input.shape())?;
    let (oh, ow) = (pooled_extent(h), pooled_extent(w));
    let data = input.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut winners = Vec::with_capacity(n * oh * ow * c);
    for s in 0..n {
        let base = s * h * w * c;
        for oy in 0..oh {
            let rows = 2 * oy..(2 * oy + 2).min(h);
            for ox in 0..ow {
                let cols = 2 * ox..(2 * ox + 2).min(w);
                for ch in 0..c {
                    let mut best_idx = base + ((2 * oy) * w + 2 * ox) * c + ch;
                    let mut best = data[best_idx];
                    for y in rows.clone() {
                        for x in cols.clone() {
                            let idx = base + (y * w + x) * c + ch;
                            if data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    winners.push(best_idx);
                }
            }
        }
    }
    cache.set(CacheState::Pool {
        input_shape: input.shape().to_vec(),
        winners,
    });
    Tensor::new(spatial_shape(n, oh, ow, c, batched), out)
}

/// Routes each output gradient entirely to its cached winner.
pub fn maxpool_backward<T: Float>(
    grad_out: &Tensor<T>,
    cache: &mut LayerCache<T>,
) -> Result<Tensor<T>, TensorError> {
    let CacheState::Pool {
        input_shape,
        winners,
    } = cache.take()
    else {
        return Err(stale("maxpool"));
    };
    if grad_out.len() != winners.len() {
        return Err(TensorError::DataLength {
            shape: grad_out.shape().to_vec(),
            expected: winners.len(),
            actual: grad_out.len(),
        });
    }
    let mut grad_in = Tensor::zeros(input_shape)?;
    let gi = grad_in.data_mut();
    for (&idx, &g) in winners.iter().zip(grad_out.data()) {
        gi[idx] += g;
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_mode_extents() {
        let input = Tensor::<f32>::zeros([75, 75, 32]).unwrap();
        let out = maxpool2x2_forward(&input, &mut LayerCache::new()).unwrap();
        assert_eq!(out.shape(), &[38, 38, 32]);
        let out = maxpool2x2_forward(
            &Tensor::<f32>::zeros([1, 1, 1]).unwrap(),
            &mut LayerCache::new(),
        )
        .unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
    }

    #[test]
    fn single_window_max_and_routing() {
        let input = Tensor::<f32>::new([2, 2, 1], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let mut cache = LayerCache::new();
        let out = maxpool2x2_forward(&input, &mut cache).unwrap();
        assert_eq!(out.data(), &[5.0]);
        assert_eq!(cache.pool_winners(), Some(&[1usize][..]));
        let grad =
            maxpool_backward(&Tensor::new([1, 1, 1], vec![1.0]).unwrap(), &mut cache).unwrap();
        assert_eq!(grad.data(), &[0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(
            maxpool_backward(&Tensor::new([1, 1, 1], vec![1.0]).unwrap(), &mut cache),
            Err(TensorError::StaleCache(_))
        ));
    }

    #[test]
    fn constant_input_pools_to_constant() {
        let input = Tensor::<f32>::full([5, 3, 2], 0.25).unwrap();
        let out = maxpool2x2_forward(&input, &mut LayerCache::new()).unwrap();
        assert_eq!(out.shape(), &[3, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn truncated_edge_windows_cover_last_row_and_column() {
        let input = Tensor::<f32>::from_fn([3, 3, 1], |i| i as f32).unwrap();
        let out = maxpool2x2_forward(&input, &mut LayerCache::new()).unwrap();
        assert_eq!(out.data(), &[4.0, 5.0, 7.0, 8.0]);
    }
}
