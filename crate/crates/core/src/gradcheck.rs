//! Central finite-difference checks of the layer backward passes.
//!
//! Each check builds a small random problem in `f64`, reduces the layer
//! output to a scalar with a fixed random projection, and compares the
//! analytic gradient against `(f(x + h) − f(x − h)) / 2h` on sampled
//! coordinates of the input and parameters.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{self, LayerCache};
use crate::{Tensor, TensorError};

/// Gradients smaller than this are compared absolutely; below it the
/// relative error only measures rounding noise of the difference quotient.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub layer: String,
    pub checked: usize,
    pub max_relative_error: f64,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0)).expect("valid shape")
}

/// Concatenation of several tensors, addressed as one flat vector.
struct Blocks {
    tensors: Vec<Tensor<f64>>,
}

impl Blocks {
    fn len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    fn locate(&self, mut i: usize) -> (usize, usize) {
        for (b, t) in self.tensors.iter().enumerate() {
            if i < t.len() {
                return (b, i);
            }
            i -= t.len();
        }
        panic!("coordinate out of range")
    }

    fn nudge(&mut self, i: usize, delta: f64) {
        let (b, j) = self.locate(i);
        self.tensors[b].data_mut()[j] += delta;
    }
}

/// Compares `analytic` (same layout as `blocks`) with central differences of
/// `loss` on up to `samples` coordinates.
fn compare(
    layer: &str,
    mut blocks: Blocks,
    analytic: &[Tensor<f64>],
    loss: impl Fn(&[Tensor<f64>]) -> Result<f64, TensorError>,
    samples: usize,
    h: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheck, TensorError> {
    let total = blocks.len();
    let picks = index::sample(rng, total, samples.min(total));
    let flat: Vec<f64> = analytic
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let mut worst: f64 = 0.0;
    for i in picks.iter() {
        blocks.nudge(i, h);
        let up = loss(&blocks.tensors)?;
        blocks.nudge(i, -2.0 * h);
        let down = loss(&blocks.tensors)?;
        blocks.nudge(i, h);
        worst = worst.max(relative_error(flat[i], (up - down) / (2.0 * h)));
    }
    Ok(GradCheck {
        layer: layer.to_string(),
        checked: picks.len(),
        max_relative_error: worst,
    })
}

fn project(out: &Tensor<f64>, weights: &Tensor<f64>) -> f64 {
    out.data()
        .iter()
        .zip(weights.data())
        .map(|(a, b)| a * b)
        .sum()
}

/// 3x3 convolution on a `2×7×6×3` batch with 4 output channels.
pub fn check_conv(seed: u64, samples: usize, h: f64) -> Result<GradCheck, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = random(&[2, 7, 6, 3], &mut rng);
    let kernels = random(&[3, 3, 3, 4], &mut rng);
    let bias = random(&[4], &mut rng);
    let proj = random(&[2, 7, 6, 4], &mut rng);
    let mut cache = LayerCache::new();
    nn::conv2d_forward(&input, &kernels, &bias, &mut cache)?;
    let g = nn::conv2d_backward(&proj, &kernels, &mut cache)?;
    let loss = |t: &[Tensor<f64>]| {
        let out = nn::conv2d_forward(&t[0], &t[1], &t[2], &mut LayerCache::new())?;
        Ok(project(&out, &proj))
    };
    let blocks = Blocks {
        tensors: vec![input, kernels, bias],
    };
    compare(
        "conv2d",
        blocks,
        &[g.input, g.kernels, g.bias],
        loss,
        samples,
        h,
        &mut rng,
    )
}

/// Dense layer on a `4×12` batch with 6 outputs.
pub fn check_dense(seed: u64, samples: usize, h: f64) -> Result<GradCheck, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = random(&[4, 12], &mut rng);
    let weights = random(&[12, 6], &mut rng);
    let bias = random(&[6], &mut rng);
    let proj = random(&[4, 6], &mut rng);
    let mut cache = LayerCache::new();
    nn::dense_forward(&input, &weights, &bias, &mut cache)?;
    let g = nn::dense_backward(&proj, &weights, &mut cache)?;
    let loss = |t: &[Tensor<f64>]| {
        let out = nn::dense_forward(&t[0], &t[1], &t[2], &mut LayerCache::new())?;
        Ok(project(&out, &proj))
    };
    let blocks = Blocks {
        tensors: vec![input, weights, bias],
    };
    compare(
        "dense",
        blocks,
        &[g.input, g.weights, g.bias],
        loss,
        samples,
        h,
        &mut rng,
    )
}

/// ReLU on inputs kept at least 0.01 away from the kink.
pub fn check_relu(seed: u64, samples: usize, h: f64) -> Result<GradCheck, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = Tensor::from_fn(vec![4, 5, 3, 3], |_| {
        let m = rng.gen_range(0.01..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })?;
    let proj = random(input.shape(), &mut rng);
    let mut cache = LayerCache::new();
    nn::relu(&input, &mut cache)?;
    let g = nn::relu_backward(&proj, &mut cache)?;
    let loss = |t: &[Tensor<f64>]| Ok(project(&nn::relu(&t[0], &mut LayerCache::new())?, &proj));
    compare(
        "relu",
        Blocks {
            tensors: vec![input],
        },
        &[g],
        loss,
        samples,
        h,
        &mut rng,
    )
}

/// 2x2 ceil-mode max pooling over a `1×7×7×3` input whose values are a
/// shuffled grid with spacing 0.01, so every window has a clear winner.
pub fn check_pool(seed: u64, samples: usize, h: f64) -> Result<GradCheck, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 7 * 7 * 3;
    let order = index::sample(&mut rng, n, n).into_vec();
    let input = Tensor::new(
        [1, 7, 7, 3],
        order.iter().map(|&k| k as f64 * 0.01).collect(),
    )?;
    let proj = random(&[1, 4, 4, 3], &mut rng);
    let mut cache = LayerCache::new();
    nn::maxpool2x2_forward(&input, &mut cache)?;
    let g = nn::maxpool_backward(&proj, &mut cache)?;
    let loss = |t: &[Tensor<f64>]| {
        Ok(project(
            &nn::maxpool2x2_forward(&t[0], &mut LayerCache::new())?,
            &proj,
        ))
    };
    compare(
        "maxpool2x2",
        Blocks {
            tensors: vec![input],
        },
        &[g],
        loss,
        samples,
        h,
        &mut rng,
    )
}

/// Batch-mean softmax cross-entropy over `25×4` logits.
pub fn check_softmax_ce(seed: u64, samples: usize, h: f64) -> Result<GradCheck, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor::from_fn(vec![25, 4], |_| rng.gen_range(-3.0..3.0))?;
    let labels: Vec<usize> = (0..25).map(|_| rng.gen_range(0..4)).collect();
    let (_, g) = nn::softmax_cross_entropy_batch(&logits, &labels)?;
    let loss = |t: &[Tensor<f64>]| Ok(nn::softmax_cross_entropy_batch(&t[0], &labels)?.0);
    compare(
        "softmax_cross_entropy",
        Blocks {
            tensors: vec![logits],
        },
        &[g],
        loss,
        samples,
        h,
        &mut rng,
    )
}

/// All five checks with the same settings.
pub fn check_all(seed: u64, samples: usize, h: f64) -> Result<Vec<GradCheck>, TensorError> {
    Ok(vec![
        check_conv(seed, samples, h)?,
        check_dense(seed, samples, h)?,
        check_relu(seed, samples, h)?,
        check_pool(seed, samples, h)?,
        check_softmax_ce(seed, samples, h)?,
    ])
}
