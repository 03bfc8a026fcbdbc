use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::arch::{hex_digest, Activation, ArchitectureSpec, LayerSpec};
use super::ModelError;
use crate::dataset::MergedLabel;
use crate::nn::{
    self, conv2d_backward_inner, conv2d_forward_owned, dense_forward_owned, LayerCache, Mode,
};
use crate::tensor::{Float, Tensor};
use crate::NUM_CLASSES;

/// Scale applied to the fan-in bound of the output layer so that initial
/// predictions are close to uniform.
const OUTPUT_INIT_GAIN: f64 = 0.1;

/// A materialized layer with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T: Float = f32> {
    Conv2d {
        kernels: Tensor<T>,
        bias: Tensor<T>,
        relu: bool,
    },
    MaxPool2x2,
    Flatten,
    Dense {
        weights: Tensor<T>,
        bias: Tensor<T>,
        relu: bool,
    },
    Dropout {
        rate: f64,
    },
}

/// Per-layer state recorded by a forward pass.
#[derive(Debug)]
pub struct LayerTrace<T: Float = f32> {
    pub(crate) cache: LayerCache<T>,
    pub(crate) relu: Option<LayerCache<T>>,
    pub(crate) input_shape: Vec<usize>,
    pub(crate) output_shape: Vec<usize>,
    /// Pre-activation output; only kept when requested (LRP needs it).
    pub(crate) pre_activation: Option<Tensor<T>>,
}

#[derive(Debug)]
pub struct ForwardTrace<T: Float = f32> {
    pub(crate) layers: Vec<LayerTrace<T>>,
}

impl<T: Float> ForwardTrace<T> {
    /// Output shape of every layer, batch axis included.
    pub fn output_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|l| l.output_shape.clone()).collect()
    }
}

/// Class decision for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: [f64; NUM_CLASSES],
    pub confidence: f64,
}

impl Prediction {
    /// Softmax over `logits`, argmax (lowest index on ties) and max-probability
    /// confidence.
    pub fn from_logits(logits: &[f64]) -> Result<Self, ModelError> {
        if logits.len() != NUM_CLASSES {
            return Err(ModelError::InputShape {
                expected: vec![NUM_CLASSES],
                actual: vec![logits.len()],
            });
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("logits".into()));
        }
        let probs = nn::softmax(logits);
        let mut probabilities = [0.0; NUM_CLASSES];
        probabilities.copy_from_slice(&probs);
        let mut class = 0;
        for (i, &p) in probabilities.iter().enumerate() {
            if p > probabilities[class] {
                class = i;
            }
        }
        Ok(Self {
            class,
            probabilities,
            confidence: probabilities[class],
        })
    }

    pub fn label(&self) -> MergedLabel {
        MergedLabel::from_index(self.class).expect("class index in range")
    }
}

/// Anything that maps preprocessed images to class logits.
pub trait Classifier {
    fn logits_batch(&self, images: &[&Tensor<f32>]) -> Result<Vec<Vec<f64>>, ModelError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Float = f32> {
    arch: ArchitectureSpec,
    layers: Vec<Layer<T>>,
}

/// Builds the SewerNet with seeded fan-in-scaled uniform weights and zero
/// biases.
pub fn build_sewernet(seed: u64) -> Network<f32> {
    Network::build(ArchitectureSpec::sewernet(), seed).expect("sewernet architecture is valid")
}

fn uniform_tensor<T: Float>(
    shape: &[usize],
    limit: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>, ModelError> {
    Ok(Tensor::from_fn(shape.to_vec(), |_| {
        T::from_f64_lossy(rng.gen_range(-limit..=limit))
    })?)
}

impl<T: Float> Network<T> {
    pub fn build(arch: ArchitectureSpec, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::materialize(arch, |shape, fan_in, activation| {
            let limit = match activation {
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                Activation::None => (3.0 / fan_in as f64).sqrt() * OUTPUT_INIT_GAIN,
            };
            uniform_tensor(shape, limit, &mut rng)
        })
    }

    /// Network with every parameter set to zero.
    pub fn zeroed(arch: ArchitectureSpec) -> Result<Self, ModelError> {
        Self::materialize(arch, |shape, _, _| Ok(Tensor::zeros(shape.to_vec())?))
    }

    fn materialize(
        arch: ArchitectureSpec,
        mut init: impl FnMut(&[usize], usize, Activation) -> Result<Tensor<T>, ModelError>,
    ) -> Result<Self, ModelError> {
        arch.summary()?;
        let mut layers = Vec::with_capacity(arch.layers.len());
        for spec in &arch.layers {
            layers.push(match *spec {
                LayerSpec::Conv2d {
                    kernel_size: k,
                    in_channels,
                    out_channels,
                    activation,
                    ..
                } => Layer::Conv2d {
                    kernels: init(
                        &[k, k, in_channels, out_channels],
                        k * k * in_channels,
                        activation,
                    )?,
                    bias: Tensor::zeros([out_channels])?,
                    relu: activation == Activation::Relu,
                },
                LayerSpec::MaxPool2x2 { .. } => Layer::MaxPool2x2,
                LayerSpec::Flatten { .. } => Layer::Flatten,
                LayerSpec::Dense {
                    inputs,
                    outputs,
                    activation,
                    ..
                } => Layer::Dense {
                    weights: init(&[inputs, outputs], inputs, activation)?,
                    bias: Tensor::zeros([outputs])?,
                    relu: activation == Activation::Relu,
                },
                LayerSpec::Dropout { rate, .. } => Layer::Dropout { rate },
            });
        }
        Ok(Self { arch, layers })
    }

    pub fn architecture(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Named parameters in canonical order (`<layer>.weight`, `<layer>.bias`).
    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (spec, layer) in self.arch.layers.iter().zip(&self.layers) {
            match layer {
                Layer::Conv2d {
                    kernels: w, bias, ..
                }
                | Layer::Dense {
                    weights: w, bias, ..
                } => {
                    out.push((format!("{}.weight", spec.name()), w));
                    out.push((format!("{}.bias", spec.name()), bias));
                }
                _ => {}
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv2d {
                    kernels: w, bias, ..
                }
                | Layer::Dense {
                    weights: w, bias, ..
                } => {
                    out.push(w);
                    out.push(bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Replaces biases with zeros (used for conservation checks).
    pub fn zero_biases(&mut self) {
        for layer in &mut self.layers {
            if let Layer::Conv2d { bias, .. } | Layer::Dense { bias, .. } = layer {
                bias.data_mut().fill(T::zero());
            }
        }
    }

    /// Overrides the training-time rate of every dropout layer. Evaluation is
    /// unaffected, so the architecture fingerprint is left alone.
    pub fn set_dropout_rate(&mut self, rate: f64) {
        for layer in &mut self.layers {
            if let Layer::Dropout { rate: r } = layer {
                *r = rate;
            }
        }
    }

    pub fn cast<U: Float>(&self) -> Network<U> {
        let layers = self
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Conv2d {
                    kernels,
                    bias,
                    relu,
                } => Layer::Conv2d {
                    kernels: kernels.cast(),
                    bias: bias.cast(),
                    relu: *relu,
                },
                Layer::MaxPool2x2 => Layer::MaxPool2x2,
                Layer::Flatten => Layer::Flatten,
                Layer::Dense {
                    weights,
                    bias,
                    relu,
                } => Layer::Dense {
                    weights: weights.cast(),
                    bias: bias.cast(),
                    relu: *relu,
                },
                Layer::Dropout { rate } => Layer::Dropout { rate: *rate },
            })
            .collect();
        Network {
            arch: self.arch.clone(),
            layers,
        }
    }

    /// SHA-256 over parameter names and their values rounded to f32,
    /// little-endian.
    pub fn weights_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, tensor) in self.parameters() {
            hasher.update(name.as_bytes());
            for v in tensor.data() {
                hasher.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn fingerprint(&self) -> String {
        self.arch.fingerprint()
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<(), ModelError> {
        let mut expected = vec![batch.shape().first().copied().unwrap_or(0)];
        expected.extend_from_slice(&self.arch.input_shape);
        if batch.shape() != expected {
            return Err(ModelError::InputShape {
                expected,
                actual: batch.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Training-mode forward pass over an `N×H×W×C` batch.
    pub fn forward_train(
        &self,
        batch: Tensor<T>,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor<T>, ForwardTrace<T>), ModelError> {
        self.forward_inner(batch, Mode::Train, Some(rng), false)
    }

    /// Evaluation-mode forward pass over an `N×H×W×C` batch.
    pub fn forward_eval(
        &self,
        batch: Tensor<T>,
    ) -> Result<(Tensor<T>, ForwardTrace<T>), ModelError> {
        self.forward_inner(batch, Mode::Eval, None, false)
    }

    pub(crate) fn forward_inner(
        &self,
        batch: Tensor<T>,
        mode: Mode,
        mut rng: Option<&mut dyn RngCore>,
        keep_pre_activation: bool,
    ) -> Result<(Tensor<T>, ForwardTrace<T>), ModelError> {
        self.check_batch(&batch)?;
        let n = batch.shape()[0];
        let mut x = batch;
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input_shape = x.shape().to_vec();
            let mut cache = LayerCache::new();
            let mut relu_cache = None;
            let mut pre_activation = None;
            x = match layer {
                Layer::Conv2d {
                    kernels,
                    bias,
                    relu,
                }
                | Layer::Dense {
                    weights: kernels,
                    bias,
                    relu,
                } => {
                    let z = if matches!(layer, Layer::Conv2d { .. }) {
                        conv2d_forward_owned(x, kernels, bias, &mut cache)?
                    } else {
                        dense_forward_owned(x, kernels, bias, &mut cache)?
                    };
                    if keep_pre_activation {
                        pre_activation = Some(z.clone());
                    }
                    if *relu {
                        let mut rc = LayerCache::new();
                        let a = nn::relu(&z, &mut rc)?;
                        relu_cache = Some(rc);
                        a
                    } else {
                        z
                    }
                }
                Layer::MaxPool2x2 => nn::maxpool2x2_forward(&x, &mut cache)?,
                Layer::Flatten => {
                    let per_sample = x.len() / n;
                    x.reshape([n, per_sample])?
                }
                Layer::Dropout { rate } => match (mode, rng.as_deref_mut()) {
                    (Mode::Train, Some(r)) => nn::dropout(&x, *rate, Mode::Train, r, &mut cache)?,
                    (Mode::Train, None) => {
                        return Err(ModelError::Architecture(
                            "training forward pass needs a random source".into(),
                        ))
                    }
                    (Mode::Eval, _) => {
                        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
                        nn::dropout(&x, *rate, Mode::Eval, &mut unused, &mut cache)?
                    }
                },
            };
            traces.push(LayerTrace {
                cache,
                relu: relu_cache,
                input_shape,
                output_shape: x.shape().to_vec(),
                pre_activation,
            });
        }
        x.ensure_finite()
            .map_err(|_| ModelError::NonFinite("logits".into()))?;
        Ok((x, ForwardTrace { layers: traces }))
    }

    /// Gradients of every parameter (canonical order) given `dLoss/dLogits`.
    pub fn backward(
        &self,
        trace: ForwardTrace<T>,
        grad_logits: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>, ModelError> {
        if trace.layers.len() != self.layers.len() {
            return Err(ModelError::Architecture(
                "trace does not belong to this network".into(),
            ));
        }
        let mut grads: Vec<Tensor<T>> = Vec::new();
        let mut g = grad_logits.clone();
        for (i, (layer, mut lt)) in self.layers.iter().zip(trace.layers).enumerate().rev() {
            if let Some(mut rc) = lt.relu.take() {
                g = nn::relu_backward(&g, &mut rc)?;
            }
            let first = i == 0;
            g = match layer {
                Layer::Conv2d { kernels, .. } => {
                    let (gi, gk, gb) = conv2d_backward_inner(&g, kernels, &mut lt.cache, !first)?;
                    grads.push(gb);
                    grads.push(gk);
                    match gi {
                        Some(gi) => gi,
                        None => break,
                    }
                }
                Layer::Dense { weights, .. } => {
                    let dg = nn::dense_backward(&g, weights, &mut lt.cache)?;
                    grads.push(dg.bias);
                    grads.push(dg.weights);
                    dg.input
                }
                Layer::MaxPool2x2 => nn::maxpool_backward(&g, &mut lt.cache)?,
                Layer::Flatten => g.reshape(lt.input_shape)?,
                Layer::Dropout { .. } => nn::dropout_backward(&g, &mut lt.cache)?,
            };
        }
        grads.reverse();
        Ok(grads)
    }

    /// Logits for a single `H×W×C` image.
    pub fn forward_logits(
        &self,
        image: &Tensor<T>,
        mode: Mode,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Vec<T>, ModelError> {
        let batch = Tensor::stack(&[image])?;
        let (logits, _) = self.forward_inner(batch, mode, rng, false)?;
        Ok(logits.into_data())
    }

    pub fn predict(&self, image: &Tensor<T>) -> Result<Prediction, ModelError> {
        let logits = self.forward_logits(image, Mode::Eval, None)?;
        let logits: Vec<f64> = logits.into_iter().map(Float::as_f64).collect();
        Prediction::from_logits(&logits)
    }
}

impl<T: Float> Classifier for Network<T> {
    fn logits_batch(&self, images: &[&Tensor<f32>]) -> Result<Vec<Vec<f64>>, ModelError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let batch: Tensor<T> = Tensor::stack(images)?.cast();
        let (logits, _) = self.forward_eval(batch)?;
        Ok(logits
            .data()
            .chunks_exact(NUM_CLASSES)
            .map(|row| row.iter().map(|v| v.as_f64()).collect())
            .collect())
    }
}

pub(crate) fn digest_bytes(bytes: &[u8]) -> String {
    hex_digest(bytes)
}
