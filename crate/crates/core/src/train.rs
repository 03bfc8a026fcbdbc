//! Mini-batch Adam training with per-epoch validation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ImageDataset, LabeledImage, MergedLabel, Split};
use crate::model::{Classifier, ModelError, Network, Prediction};
use crate::nn::softmax_cross_entropy;
use crate::nn::softmax_cross_entropy_batch;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::{Float, Tensor, TensorError};

/// Images per forward pass during evaluation.
const EVAL_BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("the {0:?} split is empty")]
    EmptySplit(Split),
    #[error("no images to evaluate")]
    NoImages,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("loss became {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn of<T: Float>() -> Self {
        if std::mem::size_of::<T>() == 8 {
            Precision::F64
        } else {
            Precision::F32
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after this many epochs without a validation-accuracy gain.
    pub early_stop_patience: Option<usize>,
    pub precision: Precision,
    /// Restore the parameters of the best validation epoch at the end.
    pub select_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-6,
            dropout: 0.5,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            early_stop_patience: None,
            precision: Precision::F32,
            select_best: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate {} must be positive",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} is outside [0, 1)", self.dropout));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.early_stop_patience == Some(0) {
            return bad("early-stop patience must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy of the training-mode (dropout on) forward passes.
    pub train_accuracy: f64,
    pub validation_loss: f64,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    /// Mean training loss before the first update.
    pub initial_loss: f64,
    pub history: Vec<EpochStats>,
    /// 1-based epoch whose parameters were kept, when `select_best` is on.
    pub best_epoch: Option<usize>,
    pub wall_time_secs: f64,
    pub checkpoint_path: Option<String>,
}

/// Per-image evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePrediction {
    pub video_id: String,
    pub frame_index: usize,
    pub truth: MergedLabel,
    pub prediction: Prediction,
}

impl ImagePrediction {
    pub fn correct(&self) -> bool {
        self.prediction.class == self.truth.index()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitEvaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<ImagePrediction>,
}

/// Mean cross-entropy, accuracy and per-image predictions.
pub fn evaluate_split<C: Classifier + ?Sized>(
    model: &C,
    images: &[LabeledImage],
) -> Result<SplitEvaluation, TrainError> {
    if images.is_empty() {
        return Err(TrainError::NoImages);
    }
    let mut loss = 0.0;
    let mut correct = 0;
    let mut predictions = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let refs: Vec<&Tensor<f32>> = chunk.iter().map(|i| i.image.as_ref()).collect();
        for (img, logits) in chunk.iter().zip(model.logits_batch(&refs)?) {
            let (l, _) = softmax_cross_entropy(&logits, img.label.index())?;
            loss += l;
            let prediction = Prediction::from_logits(&logits)?;
            correct += usize::from(prediction.class == img.label.index());
            predictions.push(ImagePrediction {
                video_id: img.video_id.clone(),
                frame_index: img.frame_index,
                truth: img.label,
                prediction,
            });
        }
    }
    let n = images.len() as f64;
    Ok(SplitEvaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
        predictions,
    })
}

/// Optimizer state plus the dropout random stream.
pub struct Trainer<T: Float = f32> {
    states: Vec<AdamState<T>>,
    dropout_rng: ChaCha8Rng,
}

/// Loss and hit count of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub correct: usize,
}

impl<T: Float> Trainer<T> {
    pub fn new(network: &Network<T>, learning_rate: f64, seed: u64) -> Self {
        let adam = AdamConfig::with_learning_rate(learning_rate);
        let states = network
            .parameters()
            .iter()
            .map(|(_, p)| AdamState::new(p.shape(), adam))
            .collect();
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
        dropout_rng.set_stream(1);
        Self {
            states,
            dropout_rng,
        }
    }

    /// Forward, backward and one Adam update on a batch.
    pub fn step(
        &mut self,
        network: &mut Network<T>,
        images: &[&Tensor<f32>],
        labels: &[usize],
    ) -> Result<StepOutcome, TrainError> {
        let batch: Tensor<T> = Tensor::stack(images)?.cast();
        let (logits, trace) = network.forward_train(batch, &mut self.dropout_rng)?;
        let (loss, grad) = softmax_cross_entropy_batch(&logits, labels)?;
        let loss = loss.as_f64();
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch: 0,
                batch: 0,
                loss,
            });
        }
        let k = logits.shape()[1];
        let correct = logits
            .data()
            .chunks_exact(k)
            .zip(labels)
            .filter(|(row, &label)| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best == label
            })
            .count();
        let grads = network.backward(trace, &grad)?;
        for ((param, g), state) in network
            .parameters_mut()
            .into_iter()
            .zip(&grads)
            .zip(&mut self.states)
        {
            adam_step(param, g, state)?;
        }
        Ok(StepOutcome { loss, correct })
    }
}

/// Trains `network` in place on the train split, validating after every epoch.
pub fn train<T: Float>(
    network: &mut Network<T>,
    dataset: &ImageDataset,
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if config.precision != Precision::of::<T>() {
        return Err(TrainError::InvalidConfig(format!(
            "config asks for {:?} but the network is {:?}",
            config.precision,
            Precision::of::<T>()
        )));
    }
    if dataset.train.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if dataset.validation.is_empty() {
        return Err(TrainError::EmptySplit(Split::Validation));
    }
    let started = Instant::now();
    network.set_dropout_rate(config.dropout);
    let initial_loss = evaluate_split(network, &dataset.train)?.loss;
    let mut trainer = Trainer::new(network, config.learning_rate, config.seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Option<Network<T>>)> = None;
    let mut since_best = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let images: Vec<&Tensor<f32>> = chunk
                .iter()
                .map(|&i| dataset.train[i].image.as_ref())
                .collect();
            let labels: Vec<usize> = chunk
                .iter()
                .map(|&i| dataset.train[i].label.index())
                .collect();
            let out = trainer
                .step(network, &images, &labels)
                .map_err(|e| match e {
                    TrainError::NonFiniteLoss { loss, .. } => TrainError::NonFiniteLoss {
                        epoch,
                        batch: b,
                        loss,
                    },
                    other => other,
                })?;
            loss_sum += out.loss * chunk.len() as f64;
            correct += out.correct;
        }
        let n = dataset.train.len() as f64;
        let val = evaluate_split(network, &dataset.validation)?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            validation_loss: val.loss,
            validation_accuracy: val.accuracy,
        };
        tracing::info!(
            epoch,
            train_loss = stats.train_loss,
            train_accuracy = stats.train_accuracy,
            validation_loss = stats.validation_loss,
            validation_accuracy = stats.validation_accuracy,
            "epoch done"
        );
        history.push(stats);
        let improved = best.as_ref().is_none_or(|(_, acc, _)| val.accuracy > *acc);
        if improved {
            since_best = 0;
            best = Some((
                epoch,
                val.accuracy,
                config.select_best.then(|| network.clone()),
            ));
        } else {
            since_best += 1;
        }
        if config.early_stop_patience.is_some_and(|p| since_best >= p) {
            tracing::info!(epoch, "early stop");
            break;
        }
    }
    let mut best_epoch = None;
    if config.select_best {
        if let Some((epoch, _, Some(snapshot))) = best {
            *network = snapshot;
            best_epoch = Some(epoch);
        }
    }
    Ok(TrainReport {
        config: config.clone(),
        initial_loss,
        history,
        best_epoch,
        wall_time_secs: started.elapsed().as_secs_f64(),
        checkpoint_path: None,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::model::{Activation, ArchitectureSpec, LayerSpec};

    fn tiny() -> ArchitectureSpec {
        ArchitectureSpec {
            input_shape: [6, 6, 3],
            num_classes: 4,
            layers: vec![
                LayerSpec::Conv2d {
                    name: "conv".into(),
                    kernel_size: 3,
                    in_channels: 3,
                    out_channels: 4,
                    activation: Activation::Relu,
                },
                LayerSpec::MaxPool2x2 {
                    name: "pool".into(),
                },
                LayerSpec::Flatten {
                    name: "flat".into(),
                },
                LayerSpec::Dense {
                    name: "fc1".into(),
                    inputs: 36,
                    outputs: 16,
                    activation: Activation::Relu,
                },
                LayerSpec::Dropout {
                    name: "drop".into(),
                    rate: 0.5,
                },
                LayerSpec::Dense {
                    name: "out".into(),
                    inputs: 16,
                    outputs: 4,
                    activation: Activation::None,
                },
            ],
        }
    }

    /// Class `c` images are bright in channel `c % 3`, with the level
    /// depending on `c / 3`.
    fn images(per_class: usize, seed: u64, video: &str) -> Vec<LabeledImage> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for label in MergedLabel::ALL {
            for i in 0..per_class {
                let c = label.index();
                let img = Tensor::from_fn(vec![6, 6, 3], |idx| {
                    let ch = idx % 3;
                    let base = if ch == c % 3 {
                        0.5 + 0.4 * (c / 3) as f32
                    } else {
                        0.1
                    };
                    base + rng.gen_range(-0.05..0.05)
                })
                .unwrap();
                out.push(LabeledImage {
                    video_id: format!("{video}-{c}"),
                    label,
                    frame_index: i,
                    image: Arc::new(img),
                });
            }
        }
        out
    }

    fn dataset() -> ImageDataset {
        ImageDataset {
            train: images(12, 1, "t"),
            validation: images(4, 2, "v"),
        }
    }

    fn config() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-2,
            epochs: 8,
            batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn learns_a_separable_toy_problem() {
        let mut net = Network::<f32>::build(tiny(), 5).unwrap();
        let report = train(
            &mut net,
            &dataset(),
            &TrainConfig {
                epochs: 30,
                ..config()
            },
        )
        .unwrap();
        assert_eq!(report.history.len(), 30);
        assert!(
            (report.initial_loss - 4f64.ln()).abs() < 0.1,
            "{}",
            report.initial_loss
        );
        let last = report.history.last().unwrap();
        assert!(last.validation_accuracy >= 0.9, "{last:?}");
        assert!(last.train_loss < report.history[0].train_loss);
    }

    #[test]
    fn same_seed_same_curves() {
        let run = || {
            let mut net = Network::<f32>::build(tiny(), 5).unwrap();
            let r = train(
                &mut net,
                &dataset(),
                &TrainConfig {
                    epochs: 3,
                    ..config()
                },
            )
            .unwrap();
            (r.history, net.weights_digest())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluation_does_not_touch_parameters() {
        let net = Network::<f32>::build(tiny(), 5).unwrap();
        let before = net.weights_digest();
        let eval = evaluate_split(&net, &dataset().validation).unwrap();
        assert_eq!(eval.predictions.len(), 16);
        assert_eq!(net.weights_digest(), before);
    }

    #[test]
    fn select_best_and_early_stop() {
        let mut net = Network::<f32>::build(tiny(), 5).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            early_stop_patience: Some(2),
            select_best: true,
            ..config()
        };
        let report = train(&mut net, &dataset(), &cfg).unwrap();
        assert!(report.history.len() < 30);
        let best = report.best_epoch.unwrap();
        let best_acc = report.history[best - 1].validation_accuracy;
        assert!(report
            .history
            .iter()
            .all(|e| e.validation_accuracy <= best_acc));
        let eval = evaluate_split(&net, &dataset().validation).unwrap();
        assert_eq!(eval.accuracy, best_acc);
    }

    #[test]
    fn config_and_split_errors() {
        let mut net = Network::<f32>::build(tiny(), 5).unwrap();
        let mut ds = dataset();
        for bad in [
            TrainConfig {
                learning_rate: 0.0,
                ..config()
            },
            TrainConfig {
                dropout: 1.0,
                ..config()
            },
            TrainConfig {
                batch_size: 0,
                ..config()
            },
            TrainConfig {
                precision: Precision::F64,
                ..config()
            },
        ] {
            assert!(matches!(
                train(&mut net, &ds, &bad),
                Err(TrainError::InvalidConfig(_))
            ));
        }
        ds.validation.clear();
        assert!(matches!(
            train(&mut net, &ds, &config()),
            Err(TrainError::EmptySplit(Split::Validation))
        ));
        assert!(matches!(
            evaluate_split(&net, &[]),
            Err(TrainError::NoImages)
        ));
    }

    #[test]
    fn diverging_training_aborts() {
        let mut net = Network::<f32>::build(tiny(), 5).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e30,
            ..config()
        };
        assert!(matches!(
            train(&mut net, &dataset(), &cfg),
            Err(TrainError::NonFiniteLoss { .. } | TrainError::Model(ModelError::NonFinite(_)))
        ));
    }
}
