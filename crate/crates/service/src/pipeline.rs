//! The continuous-training pipeline: five fixed steps from labeled videos to
//! an evaluated candidate model.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use chrono::{DateTime, Utc};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use sewer_core::dataset::{
    assemble_image_dataset, manifest_hash, merge_classes, split_by_video, undersample,
    write_manifest, DatasetManifest, FrameBank, Split, SplitOptions, SplitRounding, VideoRecord,
};
use sewer_core::eval::{
    classify_videos, evaluation_report, sample_frames, summarize, EvaluationSummary,
};
use sewer_core::frames::{
    is_preprocessed_dir, load_frames, load_preprocessed, preprocess, select_frames, stable_segment,
    DetectorConfig, DEFAULT_FPS, SEGMENT_LEN,
};
use sewer_core::model::{save_checkpoint, ArchitectureSpec, CheckpointMetadata, Network};
use sewer_core::train::{evaluate_split, train, TrainConfig};
use sewer_core::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStep {
    BalanceAndSplit,
    FrameSelection,
    Resize,
    Train,
    Evaluate,
}

impl PipelineStep {
    pub const ORDER: [PipelineStep; 5] = [
        PipelineStep::BalanceAndSplit,
        PipelineStep::FrameSelection,
        PipelineStep::Resize,
        PipelineStep::Train,
        PipelineStep::Evaluate,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunTrigger {
    /// The labeled-sample counter reached the retrain threshold.
    Threshold { labeled: u64 },
    Manual {
        #[serde(default)]
        requested_by: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub step: PipelineStep,
    pub ok: bool,
    pub detail: String,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub id: u64,
    pub trigger: RunTrigger,
    pub status: RunStatus,
    pub steps: Vec<StepResult>,
    #[serde(default)]
    pub failed_step: Option<PipelineStep>,
    #[serde(default)]
    pub candidate_version: Option<u64>,
    /// Hash of the input records and seed; equal hashes reproduce equal models.
    #[serde(default)]
    pub inputs_hash: Option<String>,
    #[serde(default)]
    pub input_count: usize,
    pub started_at: DateTime<Utc>,
    #[serde(default)]
    pub finished_at: Option<DateTime<Utc>>,
}

/// Frames of one video between selection and resizing.
#[derive(Debug, Clone)]
pub enum SelectedFrames {
    Raw(Vec<RgbImage>),
    Preprocessed(Vec<Tensor<f32>>),
}

/// Inputs of a run and the artifacts its steps hand to each other.
pub struct RunContext {
    pub records: Vec<VideoRecord>,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub manifest: Option<DatasetManifest>,
    pub selected: HashMap<String, SelectedFrames>,
    pub frames: FrameBank,
    pub network: Option<Network<f32>>,
    pub checkpoint: Option<PathBuf>,
    pub summary: Option<EvaluationSummary>,
    pub report: Option<PathBuf>,
}

impl RunContext {
    pub fn new(records: Vec<VideoRecord>, seed: u64, run_dir: PathBuf) -> Self {
        Self {
            records,
            seed,
            run_dir,
            manifest: None,
            selected: HashMap::new(),
            frames: FrameBank::new(),
            network: None,
            checkpoint: None,
            summary: None,
            report: None,
        }
    }

    pub fn inputs_hash(&self) -> String {
        format!("{}-{}", manifest_hash(&self.records), self.seed)
    }
}

pub type StepOutput = Result<String, String>;

/// The five pipeline steps. Each returns a one-line summary or an error
/// message; the runner stops at the first error.
pub trait PipelineSteps: Send + Sync {
    fn balance_and_split(&self, ctx: &mut RunContext) -> StepOutput;
    fn frame_selection(&self, ctx: &mut RunContext) -> StepOutput;
    fn resize(&self, ctx: &mut RunContext) -> StepOutput;
    fn train(&self, ctx: &mut RunContext) -> StepOutput;
    fn evaluate(&self, ctx: &mut RunContext) -> StepOutput;
}

/// Runs the steps in order, stopping after the first failure.
pub fn execute_steps(
    steps: &dyn PipelineSteps,
    ctx: &mut RunContext,
) -> (Vec<StepResult>, Option<PipelineStep>) {
    let mut results = Vec::new();
    for step in PipelineStep::ORDER {
        let start = Instant::now();
        let outcome = match step {
            PipelineStep::BalanceAndSplit => steps.balance_and_split(ctx),
            PipelineStep::FrameSelection => steps.frame_selection(ctx),
            PipelineStep::Resize => steps.resize(ctx),
            PipelineStep::Train => steps.train(ctx),
            PipelineStep::Evaluate => steps.evaluate(ctx),
        };
        let duration_ms = start.elapsed().as_millis() as u64;
        let ok = outcome.is_ok();
        results.push(StepResult {
            step,
            ok,
            detail: outcome.unwrap_or_else(|e| e),
            duration_ms,
        });
        if !ok {
            tracing::warn!(?step, "pipeline step failed");
            return (results, Some(step));
        }
    }
    (results, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub detector: DetectorConfig,
    pub frames_per_video: usize,
    pub train_fraction: f64,
    pub rounding: SplitRounding,
    /// Balance classes before splitting.
    pub undersample: bool,
    pub architecture: ArchitectureSpec,
    /// Frames per class shown in the review report.
    pub report_samples: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            detector: DetectorConfig::default(),
            frames_per_video: SEGMENT_LEN,
            train_fraction: 0.7,
            rounding: SplitRounding::default(),
            undersample: true,
            architecture: ArchitectureSpec::sewernet(),
            report_samples: 4,
        }
    }
}

/// The production implementation of the steps on top of `sewer-core`.
pub struct StandardPipeline {
    pub config: PipelineConfig,
}

impl StandardPipeline {
    pub fn new(config: PipelineConfig) -> Self {
        Self { config }
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

impl PipelineSteps for StandardPipeline {
    fn balance_and_split(&self, ctx: &mut RunContext) -> StepOutput {
        let merged = merge_classes(ctx.records.clone());
        let balanced = if self.config.undersample {
            undersample(&merged, ctx.seed).map_err(err)?
        } else {
            merged
        };
        let options = SplitOptions {
            train_fraction: self.config.train_fraction,
            seed: ctx.seed,
            rounding: self.config.rounding,
            require_both_splits: true,
        };
        let manifest = split_by_video(&balanced, &options).map_err(err)?;
        fs::create_dir_all(&ctx.run_dir).map_err(err)?;
        write_manifest(ctx.run_dir.join("manifest.jsonl"), &manifest.records()).map_err(err)?;
        let (train, val) = (
            manifest.split(Split::Train).count(),
            manifest.split(Split::Validation).count(),
        );
        ctx.manifest = Some(manifest);
        Ok(format!(
            "{} videos balanced from {}; {train} train, {val} validation",
            balanced.len(),
            ctx.records.len()
        ))
    }

    fn frame_selection(&self, ctx: &mut RunContext) -> StepOutput {
        let manifest = ctx.manifest.as_ref().ok_or("no dataset manifest")?;
        let mut extracted = 0;
        for video in &manifest.videos {
            let dir = &video.record.frames_dir;
            let frames = if is_preprocessed_dir(dir).map_err(err)? {
                SelectedFrames::Preprocessed(load_preprocessed(dir).map_err(err)?)
            } else {
                let seq = load_frames(dir, DEFAULT_FPS).map_err(err)?;
                let (_, segment) = stable_segment(&seq, &self.config.detector).map_err(err)?;
                extracted += 1;
                SelectedFrames::Raw(select_frames(&seq, &segment).map_err(err)?.to_vec())
            };
            ctx.selected.insert(video.record.id.clone(), frames);
        }
        Ok(format!(
            "{} videos, {extracted} stabilized from raw frames",
            ctx.selected.len()
        ))
    }

    fn resize(&self, ctx: &mut RunContext) -> StepOutput {
        let n = self.config.frames_per_video;
        for (id, selected) in ctx.selected.drain() {
            let frames = match selected {
                SelectedFrames::Preprocessed(f) => f,
                SelectedFrames::Raw(raw) => raw
                    .iter()
                    .take(n)
                    .map(preprocess)
                    .collect::<Result<_, _>>()
                    .map_err(err)?,
            };
            ctx.frames
                .insert(id, frames.into_iter().take(n).map(Arc::new).collect());
        }
        Ok(format!("{} videos at {n} frames", ctx.frames.len()))
    }

    fn train(&self, ctx: &mut RunContext) -> StepOutput {
        let manifest = ctx.manifest.as_ref().ok_or("no dataset manifest")?;
        let dataset = assemble_image_dataset(manifest, &ctx.frames, self.config.frames_per_video)
            .map_err(err)?;
        let mut config = self.config.train.clone();
        config.seed = ctx.seed;
        let mut network =
            Network::<f32>::build(self.config.architecture.clone(), ctx.seed).map_err(err)?;
        let report = train(&mut network, &dataset, &config).map_err(err)?;
        let path = ctx.run_dir.join("model.swnt");
        let metadata = CheckpointMetadata {
            seed: ctx.seed,
            epochs: report.history.len() as u32,
            manifest_hash: manifest_hash(&manifest.records()),
            timestamp: Utc::now().to_rfc3339(),
            ..Default::default()
        };
        save_checkpoint(&network, &metadata, &path).map_err(err)?;
        fs::write(
            ctx.run_dir.join("train_report.json"),
            serde_json::to_vec_pretty(&report).map_err(err)?,
        )
        .map_err(err)?;
        let last = report.history.last().map_or(0.0, |e| e.validation_accuracy);
        ctx.network = Some(network);
        ctx.checkpoint = Some(path);
        Ok(format!(
            "{} epochs, final validation accuracy {last:.3}",
            report.history.len()
        ))
    }

    fn evaluate(&self, ctx: &mut RunContext) -> StepOutput {
        let manifest = ctx.manifest.as_ref().ok_or("no dataset manifest")?;
        let network = ctx.network.as_ref().ok_or("no trained network")?;
        let dataset = assemble_image_dataset(manifest, &ctx.frames, self.config.frames_per_video)
            .map_err(err)?;
        let eval = evaluate_split(network, &dataset.validation).map_err(err)?;
        let videos = classify_videos(&eval.predictions).map_err(err)?;
        let summary = summarize(&eval.predictions, &videos).map_err(err)?;
        let samples = sample_frames(
            &dataset.validation,
            &eval.predictions,
            self.config.report_samples,
            ctx.seed,
        );
        let html = ctx.run_dir.join("report.html");
        evaluation_report(
            &summary,
            &samples,
            &html,
            Some(&ctx.run_dir.join("metrics.json")),
        )
        .map_err(err)?;
        let line = format!(
            "image accuracy {:.3}, video accuracy {:.3}",
            summary.image_metrics.accuracy, summary.video_metrics.accuracy
        );
        ctx.summary = Some(summary);
        ctx.report = Some(html);
        Ok(line)
    }
}
