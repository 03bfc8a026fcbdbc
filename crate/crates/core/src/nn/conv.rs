use super::{spatial_dims, spatial_shape, stale, CacheState, LayerCache};
use crate::tensor::{gemm, Float, Op, Tensor, TensorError};

/// Gradients of a stride-1, same-padded 2-D convolution.
#[derive(Debug, Clone)]
pub struct ConvGradients<T: Float = f32> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    k: usize,
    batched: bool,
}

impl Geometry {
    fn new(input: &[usize], kernels: &[usize], bias: &[usize]) -> Result<Self, TensorError> {
        let (n, h, w, c, batched) = spatial_dims(input)?;
        let &[kh, kw, kc, k] = kernels else {
            return Err(TensorError::InvalidArgument(format!(
                "kernels must be kh×kw×C×K, got {kernels:?}"
            )));
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "kernel size {kh}x{kw} must be odd for same padding"
            )));
        }
        if kc != c {
            return Err(TensorError::ShapeMismatch {
                expected: vec![kh, kw, c, k],
                actual: kernels.to_vec(),
            });
        }
        if bias != [k] {
            return Err(TensorError::ShapeMismatch {
                expected: vec![k],
                actual: bias.to_vec(),
            });
        }
        Ok(Self {
            n,
            h,
            w,
            c,
            kh,
            kw,
            k,
            batched,
        })
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.c
    }

    fn pixels(&self) -> usize {
        self.h * self.w
    }

    fn out_shape(&self) -> Vec<usize> {
        spatial_shape(self.n, self.h, self.w, self.k, self.batched)
    }
}

/// Unfolds one `h×w×c` sample into a `(h·w)×(kh·kw·c)` patch matrix with
/// zero padding.
fn im2col<T: Float>(g: &Geometry, sample: &[T], col: &mut [T]) {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let patch = g.patch();
    for y in 0..g.h {
        for x in 0..g.w {
            let row = &mut col[(y * g.w + x) * patch..][..patch];
            for dy in 0..g.kh {
                let iy = (y + dy) as isize - ph as isize;
                for dx in 0..g.kw {
                    let ix = (x + dx) as isize - pw as isize;
                    let dst = &mut row[(dy * g.kw + dx) * g.c..][..g.c];
                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                        dst.fill(T::zero());
                    } else {
                        let src = ((iy as usize) * g.w + ix as usize) * g.c;
                        dst.copy_from_slice(&sample[src..src + g.c]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto a sample.
fn col2im<T: Float>(g: &Geometry, col: &[T], sample: &mut [T]) {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let patch = g.patch();
    for y in 0..g.h {
        for x in 0..g.w {
            let row = &col[(y * g.w + x) * patch..][..patch];
            for dy in 0..g.kh {
                let iy = (y + dy) as isize - ph as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for dx in 0..g.kw {
                    let ix = (x + dx) as isize - pw as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = ((iy as usize) * g.w + ix as usize) * g.c;
                    let src = &row[(dy * g.kw + dx) * g.c..][..g.c];
                    for (d, &s) in sample[dst..dst + g.c].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn compute<T: Float>(g: &Geometry, input: &[T], kernels: &[T], bias: &[T]) -> Vec<T> {
    let (hw, patch) = (g.pixels(), g.patch());
    let mut out = vec![T::zero(); g.n * hw * g.k];
    let mut col = vec![T::zero(); hw * patch];
    for s in 0..g.n {
        im2col(g, &input[s * hw * g.c..][..hw * g.c], &mut col);
        let dst = &mut out[s * hw * g.k..][..hw * g.k];
        gemm(
            hw,
            patch,
            g.k,
            T::one(),
            &col,
            Op::Plain,
            kernels,
            Op::Plain,
            T::zero(),
            dst,
        );
        for px in dst.chunks_exact_mut(g.k) {
            for (v, &b) in px.iter_mut().zip(bias) {
                *v += b;
            }
        }
    }
    out
}

/// Routes output-space values back to input space through the kernel
/// transpose (the input-gradient computation of the convolution).
fn transpose_to_input<T: Float>(g: &Geometry, grad_out: &[T], kernels: &[T]) -> Vec<T> {
    let (hw, patch) = (g.pixels(), g.patch());
    let mut grad_in = vec![T::zero(); g.n * hw * g.c];
    let mut gcol = vec![T::zero(); hw * patch];
    for s in 0..g.n {
        let go = &grad_out[s * hw * g.k..][..hw * g.k];
        gemm(
            hw,
            g.k,
            patch,
            T::one(),
            go,
            Op::Plain,
            kernels,
            Op::Transposed,
            T::zero(),
            &mut gcol,
        );
        col2im(g, &gcol, &mut grad_in[s * hw * g.c..][..hw * g.c]);
    }
    grad_in
}

/// Stride-1 convolution with zero "same" padding: spatial dims are kept.
///
/// `input` is `H×W×C` (or `N×H×W×C`), `kernels` is `kh×kw×C×K` with odd
/// `kh`, `kw`, and `bias` has length `K`.
pub fn conv2d_forward<T: Float>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    cache: &mut LayerCache<T>,
) -> Result<Tensor<T>, TensorError> {
    conv2d_forward_owned(input.clone(), kernels, bias, cache)
}

pub(crate) fn conv2d_forward_owned<T: Float>(
    input: Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    cache: &mut LayerCache<T>,
) -> Result<Tensor<T>, TensorError> {
    let g = Geometry::new(input.shape(), kernels.shape(), bias.shape())?;
    let out = compute(&g, input.data(), kernels.data(), bias.data());
    cache.set(CacheState::Conv { input });
    Tensor::new(g.out_shape(), out)
}

pub fn conv2d_backward<T: Float>(
    grad_out: &Tensor<T>,
    kernels: &Tensor<T>,
    cache: &mut LayerCache<T>,
) -> Result<ConvGradients<T>, TensorError> {
    let (input, kernels, bias) = conv2d_backward_inner(grad_out, kernels, cache, true)?;
    Ok(ConvGradients {
        input: input.expect("input gradient requested"),
        kernels,
        bias,
    })
}

/// Backward pass that can skip the input gradient (unneeded for the first
/// layer of a network).
pub(crate) fn conv2d_backward_inner<T: Float>(
    grad_out: &Tensor<T>,
    kernels: &Tensor<T>,
    cache: &mut LayerCache<T>,
    want_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>), TensorError> {
    let CacheState::Conv { input } = cache.take() else {
        return Err(stale("conv2d"));
    };
    let k = *kernels.shape().last().unwrap_or(&0);
    let g = Geometry::new(input.shape(), kernels.shape(), &[k])?;
    grad_out.expect_shape(&g.out_shape())?;

    let (hw, patch) = (g.pixels(), g.patch());
    let mut grad_k = vec![T::zero(); patch * g.k];
    let mut grad_b = vec![T::zero(); g.k];
    let mut col = vec![T::zero(); hw * patch];
    for s in 0..g.n {
        im2col(&g, &input.data()[s * hw * g.c..][..hw * g.c], &mut col);
        let go = &grad_out.data()[s * hw * g.k..][..hw * g.k];
        gemm(
            patch,
            hw,
            g.k,
            T::one(),
            &col,
            Op::Transposed,
            go,
            Op::Plain,
            T::one(),
            &mut grad_k,
        );
        for px in go.chunks_exact(g.k) {
            for (b, &v) in grad_b.iter_mut().zip(px) {
                *b += v;
            }
        }
    }
    let grad_in = if want_input {
        let data = transpose_to_input(&g, grad_out.data(), kernels.data());
        Some(Tensor::new(input.shape().to_vec(), data)?)
    } else {
        None
    };
    Ok((
        grad_in,
        Tensor::new(kernels.shape().to_vec(), grad_k)?,
        Tensor::new([g.k], grad_b)?,
    ))
}

/// `input ⊙ (Wᵀ ⋆ scaled)`: the z-rule redistribution step through a conv
/// layer, where `scaled` holds output relevance divided by the stabilized
/// pre-activations.
pub(crate) fn conv_input_relevance<T: Float>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    scaled: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let k = *kernels.shape().last().unwrap_or(&0);
    let g = Geometry::new(input.shape(), kernels.shape(), &[k])?;
    scaled.expect_shape(&g.out_shape())?;
    let mut back = transpose_to_input(&g, scaled.data(), kernels.data());
    for (r, &a) in back.iter_mut().zip(input.data()) {
        *r *= a;
    }
    Tensor::new(input.shape().to_vec(), back)
}
