//! Layer-wise relevance propagation for the sequential network, plus
//! heatmap rendering.
//!
//! Relevance starts as the target logit and is redistributed layer by layer
//! in proportion to each input's contribution `a_i·w_ij` to the
//! pre-activation `z_j`. Bias terms and the epsilon stabilizer keep a share
//! of it; that share is reported as absorbed relevance so that
//! `input_sum + absorbed == score` can be checked.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Layer, ModelError, Network};
use crate::nn::{conv_input_relevance, Mode};
use crate::tensor::{gemm, Op};
use crate::{Float, Tensor, TensorError};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LrpError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("target class {target} is out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("epsilon must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("no frames to explain")]
    NoFrames,
    #[error("forward pass did not record {0}")]
    MissingTrace(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum LrpRule {
    LrpZero,
    LrpEpsilon { epsilon: f64 },
}

impl Default for LrpRule {
    fn default() -> Self {
        LrpRule::LrpEpsilon {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl LrpRule {
    fn epsilon(self) -> f64 {
        match self {
            LrpRule::LrpZero => 0.0,
            LrpRule::LrpEpsilon { epsilon } => epsilon,
        }
    }

    fn validate(self) -> Result<(), LrpError> {
        match self {
            LrpRule::LrpEpsilon { epsilon } if !(epsilon > 0.0 && epsilon.is_finite()) => {
                Err(LrpError::InvalidEpsilon(epsilon))
            }
            _ => Ok(()),
        }
    }
}

/// Signed per-input relevance for one image and target class.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap<T: Float = f64> {
    /// Same `H×W×C` shape as the input image.
    pub relevance: Tensor<T>,
    pub target_class: usize,
    /// The target logit the propagation started from.
    pub score: f64,
    pub rule: LrpRule,
    /// Sum of `relevance`.
    pub input_sum: f64,
    /// Relevance kept by biases and stabilizers, summed over layers.
    pub absorbed: f64,
    /// Absorbed relevance per parametrized layer, input side first.
    pub absorbed_per_layer: Vec<f64>,
}

/// Per-map accounting, as written next to rendered heatmaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub target_class: usize,
    pub score: f64,
    pub input_sum: f64,
    pub absorbed: f64,
    pub rule: LrpRule,
}

impl<T: Float> RelevanceMap<T> {
    pub fn ledger(&self) -> LedgerEntry {
        LedgerEntry {
            target_class: self.target_class,
            score: self.score,
            input_sum: self.input_sum,
            absorbed: self.absorbed,
            rule: self.rule,
        }
    }

    /// `|input_sum + absorbed − score| / |score|`.
    pub fn accounting_error(&self) -> f64 {
        (self.input_sum + self.absorbed - self.score).abs() / self.score.abs()
    }
}

/// `z + ε·sign(z)`; exact zeros stay zero and pass no relevance.
fn stabilized<T: Float>(z: T, eps: T) -> T {
    if z > T::zero() {
        z + eps
    } else if z < T::zero() {
        z - eps
    } else {
        T::zero()
    }
}

/// `s_j = R_j / stab(z_j)` and the relevance absorbed at every output,
/// `s_j·(stab(z_j) − z_j + b_j)`, summed. Units with `stab(z_j) = 0` keep all
/// of their relevance.
fn scale_relevance<T: Float>(
    relevance: &Tensor<T>,
    z: &Tensor<T>,
    bias: &[T],
    eps: T,
) -> (Tensor<T>, f64) {
    let k = bias.len();
    let mut absorbed = 0.0;
    let s = relevance
        .data()
        .iter()
        .zip(z.data())
        .enumerate()
        .map(|(i, (&r, &z))| {
            let d = stabilized(z, eps);
            if d == T::zero() {
                absorbed += r.as_f64();
                return T::zero();
            }
            let s = r / d;
            absorbed += (s * (d - z + bias[i % k])).as_f64();
            s
        })
        .collect();
    (
        Tensor::new(relevance.shape().to_vec(), s).expect("same shape"),
        absorbed,
    )
}

/// Propagates the `target` logit of `image` down to its pixels.
pub fn lrp<T: Float>(
    network: &Network<T>,
    image: &Tensor<T>,
    target: usize,
    rule: LrpRule,
) -> Result<RelevanceMap<T>, LrpError> {
    rule.validate()?;
    let classes = network.architecture().num_classes;
    if target >= classes {
        return Err(LrpError::TargetOutOfRange { target, classes });
    }
    let batch = Tensor::stack(&[image])?;
    let (logits, trace) = network.forward_inner(batch, Mode::Eval, None, true)?;
    let score = logits.data()[target];
    let mut r = Tensor::from_fn(logits.shape().to_vec(), |i| {
        if i == target {
            score
        } else {
            T::zero()
        }
    })?;
    let eps = T::from_f64_lossy(rule.epsilon());
    let mut absorbed_per_layer = Vec::new();
    for (layer, lt) in network.layers().iter().zip(&trace.layers).rev() {
        r = match layer {
            Layer::Dense { weights, bias, .. } => {
                let z = lt
                    .pre_activation
                    .as_ref()
                    .ok_or(LrpError::MissingTrace("dense pre-activation"))?;
                let a = lt
                    .cache
                    .cached_input()
                    .ok_or(LrpError::MissingTrace("dense input"))?;
                let (s, absorbed) = scale_relevance(&r, z, bias.data(), eps);
                absorbed_per_layer.push(absorbed);
                let (n_in, n_out) = (weights.shape()[0], weights.shape()[1]);
                let mut c = vec![T::zero(); n_in];
                gemm(
                    1,
                    n_out,
                    n_in,
                    T::one(),
                    s.data(),
                    Op::Plain,
                    weights.data(),
                    Op::Transposed,
                    T::zero(),
                    &mut c,
                );
                for (ci, &ai) in c.iter_mut().zip(a.data()) {
                    *ci *= ai;
                }
                Tensor::new(a.shape().to_vec(), c)?
            }
            Layer::Conv2d { kernels, bias, .. } => {
                let z = lt
                    .pre_activation
                    .as_ref()
                    .ok_or(LrpError::MissingTrace("conv pre-activation"))?;
                let a = lt
                    .cache
                    .cached_input()
                    .ok_or(LrpError::MissingTrace("conv input"))?;
                let (s, absorbed) = scale_relevance(&r, z, bias.data(), eps);
                absorbed_per_layer.push(absorbed);
                conv_input_relevance(a, kernels, &s)?
            }
            Layer::MaxPool2x2 => {
                let winners = lt
                    .cache
                    .pool_winners()
                    .ok_or(LrpError::MissingTrace("pool winners"))?;
                let mut routed = vec![T::zero(); lt.input_shape.iter().product()];
                for (&w, &v) in winners.iter().zip(r.data()) {
                    routed[w] += v;
                }
                Tensor::new(lt.input_shape.clone(), routed)?
            }
            Layer::Flatten => r.reshape(lt.input_shape.clone())?,
            Layer::Dropout { .. } => r,
        };
    }
    absorbed_per_layer.reverse();
    let relevance = r.reshape(image.shape().to_vec())?;
    Ok(RelevanceMap {
        input_sum: relevance.sum_f64(),
        absorbed: absorbed_per_layer.iter().sum(),
        absorbed_per_layer,
        relevance,
        target_class: target,
        score: score.as_f64(),
        rule,
    })
}

/// Per-frame maps of a video and their elementwise mean.
#[derive(Debug, Clone)]
pub struct VideoExplanation<T: Float = f64> {
    pub maps: Vec<RelevanceMap<T>>,
    pub mean: Tensor<T>,
}

pub fn explain_video<T: Float>(
    network: &Network<T>,
    frames: &[Tensor<T>],
    target: usize,
    rule: LrpRule,
) -> Result<VideoExplanation<T>, LrpError> {
    if frames.is_empty() {
        return Err(LrpError::NoFrames);
    }
    let maps = frames
        .iter()
        .map(|f| lrp(network, f, target, rule))
        .collect::<Result<Vec<_>, _>>()?;
    let mut mean = Tensor::zeros(maps[0].relevance.shape().to_vec())?;
    for m in &maps {
        mean.add_assign(&m.relevance)?;
    }
    mean.scale(T::one() / T::from_f64_lossy(maps.len() as f64));
    Ok(VideoExplanation { maps, mean })
}

/// Diverging red/white/blue render of an `H×W×C` map, normalized by its own
/// largest absolute channel-summed value.
pub fn render_heatmap<T: Float>(relevance: &Tensor<T>) -> Result<RgbImage, LrpError> {
    let &[h, w, c] = relevance.shape() else {
        return Err(TensorError::ShapeMismatch {
            expected: vec![0, 0, 0],
            actual: relevance.shape().to_vec(),
        }
        .into());
    };
    let plane: Vec<f64> = relevance
        .data()
        .chunks_exact(c)
        .map(|px| px.iter().map(|v| v.as_f64()).sum())
        .collect();
    let peak = plane.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = if peak > 0.0 {
            plane[y as usize * w + x as usize] / peak
        } else {
            0.0
        };
        let fade = |t: f64| (255.0 * (1.0 - t)).round() as u8;
        if v >= 0.0 {
            Rgb([255, fade(v), fade(v)])
        } else {
            Rgb([fade(-v), fade(-v), 255])
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ArchitectureSpec, LayerSpec};

    fn dense_only() -> Network<f64> {
        let arch = ArchitectureSpec {
            input_shape: [1, 1, 2],
            num_classes: 1,
            layers: vec![
                LayerSpec::Flatten { name: "f".into() },
                LayerSpec::Dense {
                    name: "d".into(),
                    inputs: 2,
                    outputs: 1,
                    activation: Activation::None,
                },
            ],
        };
        let mut net = Network::<f64>::zeroed(arch).unwrap();
        net.parameters_mut()[0]
            .data_mut()
            .copy_from_slice(&[1.0, 3.0]);
        net
    }

    #[test]
    fn hand_computed_dense_relevance() {
        let net = dense_only();
        let img = Tensor::new([1, 1, 2], vec![1.0, 2.0]).unwrap();
        let map = lrp(&net, &img, 0, LrpRule::LrpZero).unwrap();
        assert_eq!(map.relevance.data(), &[1.0, 6.0]);
        assert_eq!(map.score, 7.0);
        assert_eq!(map.absorbed, 0.0);
    }

    #[test]
    fn bias_share_is_absorbed() {
        let mut net = dense_only();
        net.parameters_mut()[1].data_mut()[0] = 3.0;
        let img = Tensor::new([1, 1, 2], vec![1.0, 2.0]).unwrap();
        let map = lrp(&net, &img, 0, LrpRule::LrpZero).unwrap();
        assert_eq!(map.score, 10.0);
        assert!((map.input_sum - 7.0).abs() < 1e-12);
        assert!((map.absorbed - 3.0).abs() < 1e-12);
    }

    #[test]
    fn target_and_rule_validation() {
        let net = dense_only();
        let img = Tensor::new([1, 1, 2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            lrp(&net, &img, 1, LrpRule::LrpZero),
            Err(LrpError::TargetOutOfRange {
                target: 1,
                classes: 1
            })
        ));
        assert!(matches!(
            lrp(&net, &img, 0, LrpRule::LrpEpsilon { epsilon: 0.0 }),
            Err(LrpError::InvalidEpsilon(_))
        ));
        let wrong = Tensor::new([1, 2, 1], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            lrp(&net, &wrong, 0, LrpRule::LrpZero),
            Err(LrpError::Model(_))
        ));
    }

    #[test]
    fn heatmap_colors() {
        let zero = Tensor::<f64>::zeros([3, 2, 3]).unwrap();
        let img = render_heatmap(&zero).unwrap();
        assert!(img.pixels().all(|p| p.0 == [255, 255, 255]));

        let mut one = zero.clone();
        one.data_mut()[(2 + 1) * 3] = 0.7;
        let img = render_heatmap(&one).unwrap();
        assert_eq!(img.get_pixel(1, 1).0, [255, 0, 0]);
        assert_eq!(img.pixels().filter(|p| p.0 != [255, 255, 255]).count(), 1);
    }

    #[test]
    fn negation_swaps_red_and_blue() {
        let map = Tensor::<f64>::from_fn([4, 4, 3], |i| ((i * 37) % 17) as f64 - 8.0).unwrap();
        let neg = map.map(|v| -v);
        let (a, b) = (render_heatmap(&map).unwrap(), render_heatmap(&neg).unwrap());
        for (p, q) in a.pixels().zip(b.pixels()) {
            assert_eq!([p.0[0], p.0[1], p.0[2]], [q.0[2], q.0[1], q.0[0]]);
        }
    }

    #[test]
    fn identical_frames_mean_equals_single_map() {
        let net = dense_only();
        let img = Tensor::new([1, 1, 2], vec![0.5, 2.0]).unwrap();
        let video = explain_video(&net, &vec![img; 3], 0, LrpRule::LrpZero).unwrap();
        assert_eq!(video.maps.len(), 3);
        assert_eq!(video.mean.data(), video.maps[0].relevance.data());
        assert!(matches!(
            explain_video(&net, &[], 0, LrpRule::LrpZero),
            Err(LrpError::NoFrames)
        ));
    }
}
