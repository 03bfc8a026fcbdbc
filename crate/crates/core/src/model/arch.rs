use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelError;
use crate::nn::pooled_extent;
use crate::NUM_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
}

/// One row of the architecture table. Activations are attributes of the
/// conv/dense rows rather than rows of their own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        name: String,
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
        activation: Activation,
    },
    MaxPool2x2 {
        name: String,
    },
    Flatten {
        name: String,
    },
    Dense {
        name: String,
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
    Dropout {
        name: String,
        rate: f64,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Conv2d { name, .. }
            | LayerSpec::MaxPool2x2 { name }
            | LayerSpec::Flatten { name }
            | LayerSpec::Dense { name, .. }
            | LayerSpec::Dropout { name, .. } => name,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "Conv2D",
            LayerSpec::MaxPool2x2 { .. } => "MaxPooling2D",
            LayerSpec::Flatten { .. } => "Flatten",
            LayerSpec::Dense { .. } => "Dense",
            LayerSpec::Dropout { .. } => "Dropout",
        }
    }

    /// Trainable parameter count (weights + biases).
    pub fn parameter_count(&self) -> usize {
        match *self {
            LayerSpec::Conv2d {
                kernel_size,
                in_channels,
                out_channels,
                ..
            } => kernel_size * kernel_size * in_channels * out_channels + out_channels,
            LayerSpec::Dense {
                inputs, outputs, ..
            } => inputs * outputs + outputs,
            _ => 0,
        }
    }
}

/// Census row: layer, output shape and parameter count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerSummary {
    pub name: String,
    pub kind: &'static str,
    pub output_shape: Vec<usize>,
    pub parameters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ArchitectureSpec {
    /// The SewerNet stack: three 3×3 conv/pool stages (32, 32, 64 filters),
    /// a 1024-unit hidden layer with 0.5 dropout and a 4-way output.
    pub fn sewernet() -> Self {
        let conv = |name: &str, in_channels, out_channels| LayerSpec::Conv2d {
            name: name.into(),
            kernel_size: 3,
            in_channels,
            out_channels,
            activation: Activation::Relu,
        };
        let pool = |name: &str| LayerSpec::MaxPool2x2 { name: name.into() };
        Self {
            input_shape: [150, 150, 3],
            num_classes: NUM_CLASSES,
            layers: vec![
                conv("conv1", 3, 32),
                pool("pool1"),
                conv("conv2", 32, 32),
                pool("pool2"),
                conv("conv3", 32, 64),
                pool("pool3"),
                LayerSpec::Flatten {
                    name: "flatten".into(),
                },
                LayerSpec::Dense {
                    name: "fc1".into(),
                    inputs: 19 * 19 * 64,
                    outputs: 1024,
                    activation: Activation::Relu,
                },
                LayerSpec::Dropout {
                    name: "dropout1".into(),
                    rate: 0.5,
                },
                LayerSpec::Dense {
                    name: "logits".into(),
                    inputs: 1024,
                    outputs: NUM_CLASSES,
                    activation: Activation::None,
                },
            ],
        }
    }

    /// Propagates shapes through the stack, checking every layer's declared
    /// dimensions against what it receives.
    pub fn summary(&self) -> Result<Vec<LayerSummary>, ModelError> {
        let mut shape = self.input_shape.to_vec();
        let mut rows = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mismatch = |expected: Vec<usize>, actual: &[usize]| {
                ModelError::Architecture(format!(
                    "layer {} expects input {expected:?} but receives {actual:?}",
                    layer.name()
                ))
            };
            shape = match *layer {
                LayerSpec::Conv2d {
                    kernel_size,
                    in_channels,
                    out_channels,
                    ..
                } => {
                    let &[h, w, c] = &shape[..] else {
                        return Err(mismatch(vec![0, 0, in_channels], &shape));
                    };
                    if c != in_channels || kernel_size % 2 == 0 {
                        return Err(mismatch(vec![h, w, in_channels], &shape));
                    }
                    vec![h, w, out_channels]
                }
                LayerSpec::MaxPool2x2 { .. } => {
                    let &[h, w, c] = &shape[..] else {
                        return Err(mismatch(vec![0, 0, 0], &shape));
                    };
                    vec![pooled_extent(h), pooled_extent(w), c]
                }
                LayerSpec::Flatten { .. } => vec![shape.iter().product()],
                LayerSpec::Dense {
                    inputs, outputs, ..
                } => {
                    if shape != [inputs] {
                        return Err(mismatch(vec![inputs], &shape));
                    }
                    vec![outputs]
                }
                LayerSpec::Dropout { rate, .. } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(ModelError::Architecture(format!(
                            "dropout rate {rate} outside [0, 1)"
                        )));
                    }
                    shape
                }
            };
            rows.push(LayerSummary {
                name: layer.name().to_string(),
                kind: layer.kind(),
                output_shape: shape.clone(),
                parameters: layer.parameter_count(),
            });
        }
        if shape != [self.num_classes] {
            return Err(ModelError::Architecture(format!(
                "network ends in {shape:?}, expected [{}]",
                self.num_classes
            )));
        }
        Ok(rows)
    }

    pub fn total_parameters(&self) -> usize {
        self.layers.iter().map(LayerSpec::parameter_count).sum()
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("architecture serializes");
        hex_digest(&bytes)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
