#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sewer_core::dataset::{write_manifest, RawLabel, VideoRecord};
use sewer_core::frames::write_tensor_frames;
use sewer_core::model::{
    save_checkpoint, Activation, ArchitectureSpec, CheckpointMetadata, LayerSpec, Network,
};
use sewer_core::train::TrainConfig;
use sewer_core::Tensor;
use sewer_service::{
    ModelRegistryEntry, NewModel, PipelineConfig, PipelineSteps, RunContext, Service,
    ServiceConfig, StepOutput,
};

/// conv 3→2, four pools down to 10x10, dense 200→4.
pub fn tiny_arch() -> ArchitectureSpec {
    let pool = |i: usize| LayerSpec::MaxPool2x2 {
        name: format!("pool{i}"),
    };
    ArchitectureSpec {
        input_shape: [150, 150, 3],
        num_classes: 4,
        layers: vec![
            LayerSpec::Conv2d {
                name: "conv1".into(),
                kernel_size: 3,
                in_channels: 3,
                out_channels: 2,
                activation: Activation::Relu,
            },
            pool(1),
            pool(2),
            pool(3),
            pool(4),
            LayerSpec::Flatten {
                name: "flatten".into(),
            },
            LayerSpec::Dense {
                name: "logits".into(),
                inputs: 200,
                outputs: 4,
                activation: Activation::None,
            },
        ],
    }
}

/// Network whose output ignores the image: `bias` is added to class
/// `class`, so the prediction is that class with confidence set by `bias`.
pub fn biased_network(class: usize, bias: f32) -> Network<f32> {
    let mut net = Network::zeroed(tiny_arch()).unwrap();
    let mut params = net.parameters_mut();
    let last = params.last_mut().unwrap();
    last.data_mut()[class] = bias;
    net
}

pub fn config(state: &Path) -> ServiceConfig {
    ServiceConfig {
        state_dir: state.to_path_buf(),
        seed: 5,
        pipeline: PipelineConfig {
            architecture: tiny_arch(),
            train: TrainConfig {
                learning_rate: 1e-2,
                batch_size: 16,
                epochs: 2,
                dropout: 0.0,
                ..TrainConfig::default()
            },
            report_samples: 1,
            ..PipelineConfig::default()
        },
        ..ServiceConfig::default()
    }
}

/// Registers `net` as a candidate from a checkpoint under `state/models`.
pub fn register(service: &Service, net: &Network<f32>, name: &str) -> ModelRegistryEntry {
    let path = service
        .config()
        .state_dir
        .join("models")
        .join(format!("{name}.swnt"));
    save_checkpoint(net, &CheckpointMetadata::default(), &path).unwrap();
    service.register_checkpoint(&path, None).unwrap()
}

/// Registers and promotes a model that always predicts `class` with
/// confidence near 1.
pub fn deploy(service: &Service, class: usize) -> ModelRegistryEntry {
    let n = service.models().len();
    let entry = register(
        service,
        &biased_network(class, 20.0),
        &format!("bias-{class}-{n}"),
    );
    service.promote(entry.version, "tester").unwrap()
}

/// 30 preprocessed frames whose brightness encodes `level`.
pub fn frame_tensors(level: u8, seed: u64) -> Vec<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = 0.15 + 0.22 * level as f32;
    (0..30)
        .map(|_| {
            Tensor::from_fn(vec![150, 150, 3], |_| {
                (base + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0)
            })
            .unwrap()
        })
        .collect()
}

pub fn write_video(dir: &Path, level: u8, seed: u64) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    write_tensor_frames(dir, &frame_tensors(level, seed)).unwrap();
    dir.to_path_buf()
}

pub const LEVEL_LABELS: [RawLabel; 4] = [
    RawLabel::Clean,
    RawLabel::SlightlyDirty,
    RawLabel::Dirty,
    RawLabel::VeryDirty,
];

/// `per_class` preprocessed videos per level plus a manifest listing them.
pub fn base_dataset(root: &Path, per_class: usize) -> PathBuf {
    let mut records = Vec::new();
    for level in 0..4u8 {
        for i in 0..per_class {
            let id = format!("base-{level}-{i}");
            let dir = write_video(&root.join(&id), level, level as u64 * 1000 + i as u64);
            records.push(VideoRecord::new(id, dir, LEVEL_LABELS[level as usize]));
        }
    }
    let path = root.join("base.jsonl");
    write_manifest(&path, &records).unwrap();
    path
}

/// Pipeline steps that only record what ran. `fail_at` makes that step
/// (0-based) fail; `hold` blocks training until released.
#[derive(Default)]
pub struct FakeSteps {
    pub calls: Mutex<Vec<&'static str>>,
    pub fail_at: Option<usize>,
    pub runs: AtomicUsize,
    pub concurrent: AtomicUsize,
    pub max_concurrent: AtomicUsize,
    pub hold: Option<Arc<(Mutex<bool>, std::sync::Condvar)>>,
}

impl FakeSteps {
    fn step(&self, index: usize, name: &'static str) -> StepOutput {
        self.calls.lock().unwrap().push(name);
        if self.fail_at == Some(index) {
            return Err(format!("{name} failed on purpose"));
        }
        Ok(name.to_string())
    }

    pub fn calls(&self) -> Vec<&'static str> {
        self.calls.lock().unwrap().clone()
    }
}

pub fn release(hold: &Arc<(Mutex<bool>, std::sync::Condvar)>) {
    *hold.0.lock().unwrap() = true;
    hold.1.notify_all();
}

impl PipelineSteps for FakeSteps {
    fn balance_and_split(&self, _: &mut RunContext) -> StepOutput {
        let now = self.concurrent.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_concurrent.fetch_max(now, Ordering::SeqCst);
        self.runs.fetch_add(1, Ordering::SeqCst);
        let out = self.step(0, "balance_and_split");
        if out.is_err() {
            self.concurrent.fetch_sub(1, Ordering::SeqCst);
        }
        out
    }

    fn frame_selection(&self, _: &mut RunContext) -> StepOutput {
        let out = self.step(1, "frame_selection");
        if out.is_err() {
            self.concurrent.fetch_sub(1, Ordering::SeqCst);
        }
        out
    }

    fn resize(&self, _: &mut RunContext) -> StepOutput {
        let out = self.step(2, "resize");
        if out.is_err() {
            self.concurrent.fetch_sub(1, Ordering::SeqCst);
        }
        out
    }

    fn train(&self, ctx: &mut RunContext) -> StepOutput {
        if let Some(hold) = &self.hold {
            let mut open = hold.0.lock().unwrap();
            while !*open {
                open = hold.1.wait(open).unwrap();
            }
        }
        let out = self.step(3, "train");
        if out.is_err() {
            self.concurrent.fetch_sub(1, Ordering::SeqCst);
            return out;
        }
        let path = ctx.run_dir.join("model.swnt");
        save_checkpoint(
            &biased_network(1, 20.0),
            &CheckpointMetadata::default(),
            &path,
        )
        .map_err(|e| e.to_string())?;
        ctx.checkpoint = Some(path);
        out
    }

    fn evaluate(&self, _: &mut RunContext) -> StepOutput {
        self.concurrent.fetch_sub(1, Ordering::SeqCst);
        self.step(4, "evaluate")
    }
}

pub fn new_model(path: PathBuf) -> NewModel {
    NewModel {
        checkpoint_path: path,
        manifest_hash: "test".into(),
        fingerprint: "test".into(),
        metrics: None,
        report_path: None,
        run_id: None,
    }
}
