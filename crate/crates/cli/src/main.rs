use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, ensure, Context, Result};
use chrono::Utc;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sewer_core::dataset::{
    assemble_image_dataset, class_counts, generate_synthetic, manifest_hash, merge_classes,
    read_manifest, split_by_video, undersample, write_manifest, DatasetManifest, FrameBank, Split,
    SplitOptions, SyntheticSpec, VideoRecord,
};
use sewer_core::eval::{classify_videos, evaluation_report, sample_frames, summarize};
use sewer_core::frames::{
    extract, frames_for_training, load_frames, load_preprocessed, DetectorConfig, SEGMENT_LEN,
};
use sewer_core::lrp::{explain_video, render_heatmap, LedgerEntry, LrpRule};
use sewer_core::model::{
    load_checkpoint_for, save_checkpoint, ArchitectureSpec, CheckpointMetadata, Network,
};
use sewer_core::train::{evaluate_split, train, TrainConfig};
use sewer_core::{Tensor, NUM_CLASSES};
use sewer_service::inbox::watch_inbox;
use sewer_service::{PipelineConfig, Service, ServiceConfig, TriageRuleSet};

#[derive(Parser)]
#[command(
    name = "sewer",
    version,
    about = "Sewer obstruction grading from inspection videos"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the triage service over HTTP.
    Serve(ServeArgs),
    /// Detect the still segment of a recording and write its 30 network-ready frames.
    ExtractFrames(ExtractArgs),
    /// Merge, balance and split a labeled manifest.
    PrepareDataset(PrepareArgs),
    /// Render a synthetic corpus of inspection videos.
    Synth(SynthArgs),
    /// Train a network on a manifest.
    Train(TrainArgs),
    /// Image- and video-wise evaluation with an HTML report.
    Evaluate(EvaluateArgs),
    /// Relevance heatmaps for the frames of one video.
    Explain(ExplainArgs),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "SEWER_STATE")]
    state: PathBuf,
    /// Triage rule set (JSON); the default rules when absent.
    #[arg(long, env = "SEWER_RULES")]
    rules: Option<PathBuf>,
    #[arg(long, env = "SEWER_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "SEWER_BIND", default_value = "127.0.0.1")]
    bind: String,
    /// Full service configuration (JSON); flags override its fields.
    #[arg(long, env = "SEWER_CONFIG")]
    config: Option<PathBuf>,
    /// Original training manifest merged with labels on every retraining run.
    #[arg(long, env = "SEWER_BASE_MANIFEST")]
    base_manifest: Option<PathBuf>,
    /// Registers and promotes this checkpoint when no model is in production.
    #[arg(long, env = "SEWER_BOOTSTRAP")]
    bootstrap: Option<PathBuf>,
    /// Seconds between inbox scans.
    #[arg(long, env = "SEWER_INBOX_INTERVAL", default_value_t = 2)]
    inbox_interval: u64,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 15)]
    window: usize,
    #[arg(long, default_value_t = 10.0)]
    fps: f64,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    train_fraction: f64,
    /// Keep every video instead of undersampling to the rarest class.
    #[arg(long)]
    no_undersample: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    classes: u8,
    #[arg(long)]
    videos_per_class: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Write the extracted 150x150 segment instead of the full recording.
    #[arg(long)]
    preprocessed: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Training configuration, or a pipeline configuration with `train`,
    /// `architecture` and split settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ArchArg {
    /// Architecture (JSON) when the checkpoint is not the standard network.
    #[arg(long)]
    arch: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "report.html")]
    out: PathBuf,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    samples: usize,
    #[command(flatten)]
    arch: ArchArg,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    frames: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..NUM_CLASSES as i64))]
    class: u8,
    #[arg(long)]
    out: PathBuf,
    /// Stabilizing-layer epsilon; plain LRP-0 when absent.
    #[arg(long)]
    epsilon: Option<f64>,
    #[command(flatten)]
    arch: ArchArg,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn architecture(arg: &ArchArg) -> Result<ArchitectureSpec> {
    match &arg.arch {
        Some(p) => read_json(p),
        None => Ok(ArchitectureSpec::sewernet()),
    }
}

/// A training-only config is accepted in place of a pipeline config.
fn pipeline_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    let value: serde_json::Value = read_json(path)?;
    let is_pipeline = value
        .as_object()
        .is_some_and(|o| o.contains_key("train") || o.contains_key("architecture"));
    if is_pipeline {
        Ok(serde_json::from_value(value)?)
    } else {
        let train: TrainConfig = serde_json::from_value(value)?;
        Ok(PipelineConfig {
            train,
            ..PipelineConfig::default()
        })
    }
}

fn load_bank(manifest: &DatasetManifest, detector: &DetectorConfig) -> Result<FrameBank> {
    let mut bank = FrameBank::new();
    for v in &manifest.videos {
        let frames = frames_for_training(&v.record.frames_dir, detector)
            .with_context(|| format!("frames of {}", v.record.id))?;
        bank.insert(
            v.record.id.clone(),
            frames.into_iter().map(Arc::new).collect(),
        );
    }
    Ok(bank)
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Serve(a) => serve(a),
        Command::ExtractFrames(a) => extract_frames(a),
        Command::PrepareDataset(a) => prepare_dataset(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Explain(a) => explain(a),
    }
}

fn serve(a: ServeArgs) -> Result<()> {
    let mut config: ServiceConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ServiceConfig::default(),
    };
    config.state_dir = a.state;
    if let Some(p) = &a.rules {
        let rules: TriageRuleSet = read_json(p)?;
        config.rules = rules;
    }
    if a.base_manifest.is_some() {
        config.base_manifest = a.base_manifest;
    }
    let service = Service::open(config).context("opening service state")?;
    if let (Some(ckpt), None) = (&a.bootstrap, service.production()) {
        let entry = service.register_checkpoint(ckpt, None)?;
        service.promote(entry.version, "bootstrap")?;
        tracing::info!(version = entry.version, "bootstrap checkpoint promoted");
    }
    let _inbox = watch_inbox(
        service.clone(),
        Duration::from_secs(a.inbox_interval.max(1)),
    );
    let app = sewer_service::http::router(service);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.bind.as_str(), a.port)).await?;
        tracing::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn extract_frames(a: ExtractArgs) -> Result<()> {
    ensure!(a.window % 2 == 1, "--window must be odd");
    let seq = load_frames(&a.input, a.fps)?;
    let detector = DetectorConfig {
        window: a.window,
        ..DetectorConfig::default()
    };
    let ex = extract(&seq, &detector)?;
    fs::create_dir_all(&a.out)?;
    ex.write(&a.out)?;
    println!(
        "{} frames {}..{} written to {}{}",
        ex.frames.len(),
        ex.selected.start,
        ex.selected.end,
        a.out.display(),
        if ex.segment.low_confidence {
            " (low-confidence segment)"
        } else {
            ""
        }
    );
    Ok(())
}

fn prepare_dataset(a: PrepareArgs) -> Result<()> {
    let records = read_manifest(&a.manifest)?;
    let merged = merge_classes(records);
    let balanced = if a.no_undersample {
        merged
    } else {
        undersample(&merged, a.seed)?
    };
    let options = SplitOptions {
        train_fraction: a.train_fraction,
        ..SplitOptions::new(a.seed)
    };
    let manifest = split_by_video(&balanced, &options)?;
    write_manifest(&a.out, &manifest.records())?;
    println!(
        "{} videos (per class {:?}); train {:?}, validation {:?}",
        balanced.len(),
        class_counts(&balanced),
        manifest.class_counts(Split::Train),
        manifest.class_counts(Split::Validation)
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    ensure!((1..=4).contains(&a.classes), "--classes must be 1..=4");
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
    let mut records = Vec::new();
    for level in 0..a.classes {
        for i in 0..a.videos_per_class {
            let spec = SyntheticSpec::new(level, rng.gen());
            let video = generate_synthetic(&spec)?;
            let id = format!("syn-{level}-{i:04}");
            let dir = a.out.join(&id);
            fs::create_dir_all(&dir)?;
            if a.preprocessed {
                extract(&video.sequence, &DetectorConfig::default())?.write(&dir)?;
            } else {
                for (k, f) in video.sequence.frames().iter().enumerate() {
                    f.save(dir.join(format!("frame_{k:04}.png")))?;
                }
            }
            let mut record = VideoRecord::new(id, dir, video.raw_label());
            record.date = Some(Utc::now().date_naive().to_string());
            records.push(record);
        }
    }
    let path = a.out.join("manifest.jsonl");
    write_manifest(&path, &records)?;
    println!("{} videos, manifest {}", records.len(), path.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = pipeline_config(a.config.as_deref())?;
    let records = read_manifest(&a.manifest)?;
    let manifest = if records.iter().all(|r| r.split.is_some()) {
        DatasetManifest::from_records(records)?
    } else {
        let options = SplitOptions {
            train_fraction: cfg.train_fraction,
            rounding: cfg.rounding,
            ..SplitOptions::new(cfg.train.seed)
        };
        split_by_video(&merge_classes(records), &options)?
    };
    let bank = load_bank(&manifest, &cfg.detector)?;
    let dataset = assemble_image_dataset(&manifest, &bank, cfg.frames_per_video)?;
    let mut network = Network::<f32>::build(cfg.architecture.clone(), cfg.train.seed)?;
    let mut report = train(&mut network, &dataset, &cfg.train)?;
    let metadata = CheckpointMetadata {
        seed: cfg.train.seed,
        epochs: report.history.len() as u32,
        manifest_hash: manifest_hash(&manifest.records()),
        timestamp: Utc::now().to_rfc3339(),
        ..Default::default()
    };
    save_checkpoint(&network, &metadata, &a.out)?;
    report.checkpoint_path = Some(a.out.display().to_string());
    let report_path = a.out.with_extension("report.json");
    write_json(&report_path, &report)?;
    let last = report.history.last();
    println!(
        "{} epochs, validation accuracy {:.3}; checkpoint {}, report {}",
        report.history.len(),
        last.map_or(f64::NAN, |e| e.validation_accuracy),
        a.out.display(),
        report_path.display()
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let spec = architecture(&a.arch)?;
    let (network, _) = load_checkpoint_for(&a.ckpt, &spec)?;
    let mut records = read_manifest(&a.manifest)?;
    // Without splits every video is evaluated.
    if records.iter().any(|r| r.split.is_none()) {
        for r in &mut records {
            r.split = Some(Split::Validation);
        }
    }
    let manifest = DatasetManifest::from_records(records)?;
    let bank = load_bank(&manifest, &DetectorConfig::default())?;
    let dataset = assemble_image_dataset(&manifest, &bank, SEGMENT_LEN)?;
    ensure!(
        !dataset.validation.is_empty(),
        "the manifest has no validation videos"
    );
    let eval = evaluate_split(&network, &dataset.validation)?;
    let videos = classify_videos(&eval.predictions)?;
    let summary = summarize(&eval.predictions, &videos)?;
    let samples = sample_frames(&dataset.validation, &eval.predictions, a.samples, 0);
    evaluation_report(&summary, &samples, &a.out, a.json.as_deref())?;
    println!(
        "image accuracy {:.3} ({} frames), video accuracy {:.3} ({} videos); report {}",
        summary.image_metrics.accuracy,
        summary.image_count,
        summary.video_metrics.accuracy,
        summary.video_count,
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ExplainLedger {
    checkpoint: PathBuf,
    frames_dir: PathBuf,
    target_class: usize,
    frames: Vec<FrameLedger>,
}

#[derive(Serialize)]
struct FrameLedger {
    frame_index: usize,
    heatmap: String,
    #[serde(flatten)]
    ledger: LedgerEntry,
    accounting_error: f64,
}

fn explain(a: ExplainArgs) -> Result<()> {
    let spec = architecture(&a.arch)?;
    let (network, _) = load_checkpoint_for(&a.ckpt, &spec)?;
    let frames: Vec<Tensor<f32>> = match load_preprocessed(&a.frames) {
        Ok(f) if !f.is_empty() => f,
        _ => frames_for_training(&a.frames, &DetectorConfig::default())?,
    };
    if frames.is_empty() {
        bail!("no frames in {}", a.frames.display());
    }
    let rule = match a.epsilon {
        Some(epsilon) => LrpRule::LrpEpsilon { epsilon },
        None => LrpRule::LrpZero,
    };
    let target = a.class as usize;
    let video = explain_video(&network, &frames, target, rule)?;
    fs::create_dir_all(&a.out)?;
    let mut ledger = ExplainLedger {
        checkpoint: a.ckpt.clone(),
        frames_dir: a.frames.clone(),
        target_class: target,
        frames: Vec::new(),
    };
    for (i, map) in video.maps.iter().enumerate() {
        let name = format!("heatmap_{i:03}.png");
        render_heatmap(&map.relevance)?.save(a.out.join(&name))?;
        ledger.frames.push(FrameLedger {
            frame_index: i,
            heatmap: name,
            ledger: map.ledger(),
            accounting_error: map.accounting_error(),
        });
    }
    render_heatmap(&video.mean)?.save(a.out.join("heatmap_mean.png"))?;
    write_json(&a.out.join("ledger.json"), &ledger)?;
    println!(
        "{} heatmaps for class {target} in {}",
        video.maps.len(),
        a.out.display()
    );
    Ok(())
}
