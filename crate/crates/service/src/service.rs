use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, RwLock};
use std::thread::JoinHandle;

use base64::Engine;
use chrono::Utc;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sewer_core::dataset::{append_record, read_manifest, write_manifest, RawLabel, VideoRecord};
use sewer_core::eval::classify_video;
use sewer_core::frames::{
    extract, is_preprocessed_dir, load_frames, load_preprocessed, write_tensor_frames,
    DetectorConfig, DEFAULT_FPS, SEGMENT_LEN,
};
use sewer_core::lrp::{explain_video, render_heatmap, LedgerEntry, LrpRule};
use sewer_core::model::{load_checkpoint_for, Classifier, Network, Prediction};
use sewer_core::{Tensor, NUM_CLASSES};

use crate::inspection::{InspectionRecord, InspectionStatus};
use crate::pipeline::{
    execute_steps, PipelineConfig, PipelineRun, PipelineSteps, RunContext, RunStatus, RunTrigger,
    StandardPipeline,
};
use crate::registry::{ModelMetrics, ModelRegistryEntry, NewModel};
use crate::store::{Event, State, Store};
use crate::triage::{triage, TriageRuleSet};
use crate::ServiceError;

/// Labeled samples, one JSON record per line, that feed retraining.
pub const INGEST_MANIFEST: &str = "ingest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub state_dir: PathBuf,
    pub rules: TriageRuleSet,
    /// Frames classified per inspection.
    pub frames_per_classification: usize,
    /// Labels that trigger a retraining run.
    pub retrain_threshold: u64,
    pub auto_retrain: bool,
    pub seed: u64,
    pub detector: DetectorConfig,
    pub pipeline: PipelineConfig,
    /// Original training data, merged with the ingested labels on every run.
    pub base_manifest: Option<PathBuf>,
    pub default_page_size: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            state_dir: PathBuf::from("state"),
            rules: TriageRuleSet::default(),
            frames_per_classification: 10,
            retrain_threshold: 40,
            auto_retrain: true,
            seed: 0,
            detector: DetectorConfig::default(),
            pipeline: PipelineConfig::default(),
            base_manifest: None,
            default_page_size: 20,
        }
    }
}

/// Frames of a new inspection.
#[derive(Debug, Clone)]
pub enum Submission {
    /// A directory readable by the server.
    Directory(PathBuf),
    /// Uploaded files as `(file name, bytes)`.
    Upload(Vec<(String, Vec<u8>)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueuePage {
    pub items: Vec<InspectionRecord>,
    /// 1-based.
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub pages: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameExplanation {
    pub frame_index: usize,
    /// Base64 PNG of the rendered heatmap.
    pub heatmap_png: String,
    pub ledger: LedgerEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub inspection_id: String,
    pub target_class: usize,
    pub model_version: u64,
    pub frames: Vec<FrameExplanation>,
    pub mean_heatmap_png: String,
}

struct LoadedModel {
    version: u64,
    network: Network<f32>,
}

#[derive(Default)]
struct RunQueue {
    running: Option<u64>,
    pending: VecDeque<RunTrigger>,
}

struct Inner {
    config: ServiceConfig,
    store: Mutex<Store>,
    production: RwLock<Option<Arc<LoadedModel>>>,
    steps: Arc<dyn PipelineSteps>,
    runs: Mutex<RunQueue>,
    runs_idle: Condvar,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

/// Cheaply cloneable handle to one service instance.
#[derive(Clone)]
pub struct Service {
    inner: Arc<Inner>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn encode_png(img: &image::RgbImage) -> Result<String, ServiceError> {
    let mut bytes = Vec::new();
    img.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )
    .map_err(|e| ServiceError::Model(e.to_string()))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
}

/// Keeps the file name only and rejects anything that could leave the
/// upload directory.
fn sanitize_name(name: &str) -> Option<String> {
    let base = Path::new(name).file_name()?.to_str()?;
    let ok = !base.starts_with('.')
        && base
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "._-".contains(c));
    ok.then(|| base.to_string())
}

impl Service {
    /// Opens the state directory with the standard pipeline.
    pub fn open(config: ServiceConfig) -> Result<Self, ServiceError> {
        let steps = Arc::new(StandardPipeline::new(config.pipeline.clone()));
        Self::with_pipeline(config, steps)
    }

    pub fn with_pipeline(
        config: ServiceConfig,
        steps: Arc<dyn PipelineSteps>,
    ) -> Result<Self, ServiceError> {
        config.rules.validate()?;
        if config.frames_per_classification == 0 || config.frames_per_classification > SEGMENT_LEN {
            return Err(ServiceError::InvalidInput(format!(
                "frames per classification must be in 1..={SEGMENT_LEN}"
            )));
        }
        if config.retrain_threshold == 0 {
            return Err(ServiceError::InvalidInput(
                "retrain threshold must be positive".into(),
            ));
        }
        let mut store = Store::open(&config.state_dir)?;
        // A run interrupted by a restart can never finish.
        let stale: Vec<Event> = store
            .state()
            .runs
            .values()
            .filter(|r| r.status == RunStatus::Running)
            .map(|r| {
                let mut r = r.clone();
                r.status = RunStatus::Failed;
                r.finished_at = Some(Utc::now());
                Event::Run { run: r }
            })
            .collect();
        store.commit(stale)?;
        let service = Self {
            inner: Arc::new(Inner {
                store: Mutex::new(store),
                production: RwLock::new(None),
                steps,
                runs: Mutex::new(RunQueue::default()),
                runs_idle: Condvar::new(),
                workers: Mutex::new(Vec::new()),
                config,
            }),
        };
        service.reconcile_ingest()?;
        let production = lock(&service.inner.store)
            .state()
            .registry
            .production()
            .cloned();
        if let Some(entry) = production {
            let loaded = service.load(&entry)?;
            *service
                .inner
                .production
                .write()
                .unwrap_or_else(|p| p.into_inner()) = Some(Arc::new(loaded));
        }
        Ok(service)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    fn state_dir(&self) -> &Path {
        &self.inner.config.state_dir
    }

    pub fn ingest_manifest_path(&self) -> PathBuf {
        self.state_dir().join(INGEST_MANIFEST)
    }

    /// A consistent copy of the whole state.
    pub fn snapshot(&self) -> State {
        lock(&self.inner.store).state().clone()
    }

    /// Makes the ingestion manifest hold every labeled inspection exactly
    /// once, in labeling order.
    fn reconcile_ingest(&self) -> Result<(), ServiceError> {
        let store = lock(&self.inner.store);
        let path = self.ingest_manifest_path();
        let existing = if path.exists() {
            read_manifest(&path)?
        } else {
            Vec::new()
        };
        let mut labeled: Vec<&InspectionRecord> = store
            .state()
            .inspections
            .values()
            .filter(|r| r.status == InspectionStatus::Labeled)
            .collect();
        labeled.sort_by_key(|r| (r.labeled_at, r.sequence));
        let expected: Vec<VideoRecord> = labeled
            .into_iter()
            .map(ingest_record)
            .collect::<Result<_, _>>()?;
        if existing != expected {
            tracing::warn!(
                found = existing.len(),
                expected = expected.len(),
                "rewriting ingestion manifest from the event log"
            );
            write_manifest(&path, &expected)?;
        }
        Ok(())
    }

    fn load(&self, entry: &ModelRegistryEntry) -> Result<LoadedModel, ServiceError> {
        let (network, _) = load_checkpoint_for(
            &entry.checkpoint_path,
            &self.inner.config.pipeline.architecture,
        )
        .map_err(|e| ServiceError::Model(format!("loading version {}: {e}", entry.version)))?;
        Ok(LoadedModel {
            version: entry.version,
            network,
        })
    }

    fn production_model(&self) -> Option<Arc<LoadedModel>> {
        self.inner
            .production
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .clone()
    }

    // ---- inspections ----

    pub fn submit(&self, submission: Submission) -> Result<InspectionRecord, ServiceError> {
        let model = self
            .production_model()
            .ok_or(ServiceError::NoProductionModel)?;
        if let Submission::Upload(files) = &submission {
            if files.is_empty() {
                return Err(ServiceError::InvalidFrames("no files uploaded".into()));
            }
        }
        let sequence = {
            let mut store = lock(&self.inner.store);
            let mut counters = store.state().counters;
            counters.submitted += 1;
            store.commit(vec![Event::Counters { counters }])?;
            counters.submitted
        };
        let id = format!("insp-{sequence:06}");
        let dir = self.state_dir().join("inspections").join(&id);
        let result = self.classify_new(&id, sequence, &dir, submission, &model);
        if result.is_err() {
            let _ = fs::remove_dir_all(&dir);
        }
        let record = result?;
        lock(&self.inner.store).commit(vec![Event::Inspection {
            record: record.clone(),
        }])?;
        tracing::info!(id = %record.id, status = record.status.as_str(), "inspection classified");
        Ok(record)
    }

    fn classify_new(
        &self,
        id: &str,
        sequence: u64,
        dir: &Path,
        submission: Submission,
        model: &LoadedModel,
    ) -> Result<InspectionRecord, ServiceError> {
        let invalid = |e: &dyn std::fmt::Display| ServiceError::InvalidFrames(e.to_string());
        let source = match submission {
            Submission::Directory(p) => p,
            Submission::Upload(files) => {
                let upload = dir.join("upload");
                fs::create_dir_all(&upload)?;
                for (name, bytes) in files {
                    let name = sanitize_name(&name).ok_or_else(|| {
                        ServiceError::InvalidFrames(format!("bad file name {name:?}"))
                    })?;
                    fs::write(upload.join(name), bytes)?;
                }
                upload
            }
        };
        let frames_dir = dir.join("frames");
        fs::create_dir_all(&frames_dir)?;
        let (frames, low_confidence) = if is_preprocessed_dir(&source).map_err(|e| invalid(&e))? {
            let mut frames = load_preprocessed(&source).map_err(|e| invalid(&e))?;
            frames.truncate(SEGMENT_LEN);
            write_tensor_frames(&frames_dir, &frames).map_err(|e| invalid(&e))?;
            (frames, false)
        } else {
            let seq = load_frames(&source, DEFAULT_FPS).map_err(|e| invalid(&e))?;
            let ex = extract(&seq, &self.inner.config.detector).map_err(|e| invalid(&e))?;
            ex.write(&frames_dir).map_err(|e| invalid(&e))?;
            let low = ex.segment.low_confidence;
            (ex.frames, low)
        };
        let mut record = InspectionRecord {
            id: id.to_string(),
            frames_dir,
            source_dir: source,
            submitted_at: Utc::now(),
            sequence,
            status: InspectionStatus::Received,
            prediction: None,
            decision: None,
            classified_frames: Vec::new(),
            model_version: None,
            human_label: None,
            operator: None,
            labeled_at: None,
            low_confidence_segment: low_confidence,
        };
        let k = self
            .inner
            .config
            .frames_per_classification
            .min(frames.len());
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.inner.config.seed ^ sequence.wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        let mut picks = index::sample(&mut rng, frames.len(), k).into_vec();
        picks.sort_unstable();
        let chosen: Vec<&Tensor<f32>> = picks.iter().map(|&i| &frames[i]).collect();
        let logits = model
            .network
            .logits_batch(&chosen)
            .map_err(|e| ServiceError::InvalidFrames(e.to_string()))?;
        let predictions = logits
            .iter()
            .map(|l| Prediction::from_logits(l))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ServiceError::Model(e.to_string()))?;
        let video =
            classify_video(id, &predictions).map_err(|e| ServiceError::Model(e.to_string()))?;
        record.transition(InspectionStatus::Classified)?;
        let decision = triage(&video, &self.inner.config.rules);
        record.transition(decision.into())?;
        record.prediction = Some(video);
        record.decision = Some(decision);
        record.classified_frames = picks;
        record.model_version = Some(model.version);
        Ok(record)
    }

    pub fn inspection(&self, id: &str) -> Result<InspectionRecord, ServiceError> {
        lock(&self.inner.store)
            .state()
            .inspections
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    /// Records a human label, appends the sample to the ingestion manifest
    /// and may trigger retraining.
    pub fn label(
        &self,
        id: &str,
        label: RawLabel,
        operator: &str,
    ) -> Result<InspectionRecord, ServiceError> {
        if operator.trim().is_empty() {
            return Err(ServiceError::InvalidInput("operator is required".into()));
        }
        let (record, trigger) = {
            let mut store = lock(&self.inner.store);
            let mut record = store
                .state()
                .inspections
                .get(id)
                .cloned()
                .ok_or_else(|| ServiceError::NotFound(id.to_string()))?;
            record.transition(InspectionStatus::Labeled)?;
            record.human_label = Some(label);
            record.operator = Some(operator.to_string());
            record.labeled_at = Some(Utc::now());
            let mut counters = store.state().counters;
            counters.labeled_total += 1;
            counters.labels_since_trigger += 1;
            let threshold = self.inner.config.retrain_threshold;
            let trigger = (self.inner.config.auto_retrain
                && counters.labels_since_trigger >= threshold)
                .then(|| {
                    counters.labels_since_trigger -= threshold;
                    RunTrigger::Threshold {
                        labeled: counters.labeled_total,
                    }
                });
            store.commit(vec![
                Event::Inspection {
                    record: record.clone(),
                },
                Event::Counters { counters },
            ])?;
            // Appended under the store lock so manifest order is label order.
            append_record(self.ingest_manifest_path(), &ingest_record(&record)?)?;
            (record, trigger)
        };
        if let Some(trigger) = trigger {
            self.enqueue_run(trigger)?;
        }
        Ok(record)
    }

    /// Queued inspections (or those with `status`), urgent first, then
    /// oldest first. `page` is 1-based.
    pub fn queue(
        &self,
        status: Option<InspectionStatus>,
        page: usize,
        page_size: Option<usize>,
    ) -> Result<QueuePage, ServiceError> {
        let page_size = page_size.unwrap_or(self.inner.config.default_page_size);
        if page == 0 || page_size == 0 || page_size > 1000 {
            return Err(ServiceError::InvalidInput(
                "page is 1-based and page size must be in 1..=1000".into(),
            ));
        }
        let mut items: Vec<InspectionRecord> = lock(&self.inner.store)
            .state()
            .inspections
            .values()
            .filter(|r| match status {
                Some(s) => r.status == s,
                None => r.status.is_queued(),
            })
            .cloned()
            .collect();
        items.sort_by(|a, b| {
            (a.status.priority(), a.submitted_at, a.sequence).cmp(&(
                b.status.priority(),
                b.submitted_at,
                b.sequence,
            ))
        });
        let total = items.len();
        let items = items
            .into_iter()
            .skip((page - 1) * page_size)
            .take(page_size)
            .collect();
        Ok(QueuePage {
            items,
            page,
            page_size,
            total,
            pages: total.div_ceil(page_size),
        })
    }

    /// Relevance heatmaps of the classified frames for `class` (default: the
    /// predicted class), from the model that classified the inspection when
    /// it can still be loaded.
    pub fn explain(&self, id: &str, class: Option<usize>) -> Result<Explanation, ServiceError> {
        let record = self.inspection(id)?;
        let prediction = record.prediction.as_ref().ok_or_else(|| {
            ServiceError::InvalidInput(format!("inspection {id} is not classified"))
        })?;
        let target = class.unwrap_or(prediction.class);
        if target >= NUM_CLASSES {
            return Err(ServiceError::InvalidInput(format!(
                "class {target} is outside 0..{NUM_CLASSES}"
            )));
        }
        let model = self.model_for(record.model_version)?;
        let frames = load_preprocessed(&record.frames_dir)
            .map_err(|e| ServiceError::InvalidFrames(e.to_string()))?;
        let chosen: Vec<Tensor<f32>> = record
            .classified_frames
            .iter()
            .filter_map(|&i| frames.get(i).cloned())
            .collect();
        let video = explain_video(&model.network, &chosen, target, LrpRule::default())
            .map_err(|e| ServiceError::Model(e.to_string()))?;
        let render = |t: &Tensor<f32>| -> Result<String, ServiceError> {
            encode_png(&render_heatmap(t).map_err(|e| ServiceError::Model(e.to_string()))?)
        };
        let frames = record
            .classified_frames
            .iter()
            .zip(&video.maps)
            .map(|(&frame_index, map)| {
                Ok(FrameExplanation {
                    frame_index,
                    heatmap_png: render(&map.relevance)?,
                    ledger: map.ledger(),
                })
            })
            .collect::<Result<Vec<_>, ServiceError>>()?;
        Ok(Explanation {
            inspection_id: record.id,
            target_class: target,
            model_version: model.version,
            frames,
            mean_heatmap_png: render(&video.mean)?,
        })
    }

    fn model_for(&self, version: Option<u64>) -> Result<Arc<LoadedModel>, ServiceError> {
        let production = self.production_model();
        if let (Some(v), Some(p)) = (version, &production) {
            if p.version == v {
                return Ok(Arc::clone(p));
            }
        }
        if let Some(v) = version {
            let entry = lock(&self.inner.store).state().registry.get(v).cloned();
            if let Some(entry) = entry {
                if let Ok(m) = self.load(&entry) {
                    return Ok(Arc::new(m));
                }
            }
        }
        production.ok_or(ServiceError::NoProductionModel)
    }

    // ---- models ----

    pub fn models(&self) -> Vec<ModelRegistryEntry> {
        lock(&self.inner.store).state().registry.entries().to_vec()
    }

    pub fn production(&self) -> Option<ModelRegistryEntry> {
        lock(&self.inner.store)
            .state()
            .registry
            .production()
            .cloned()
    }

    /// Version of the model new classifications use.
    pub fn serving_version(&self) -> Option<u64> {
        self.production_model().map(|m| m.version)
    }

    pub fn register_model(&self, model: NewModel) -> Result<ModelRegistryEntry, ServiceError> {
        let mut store = lock(&self.inner.store);
        let mut registry = store.state().registry.clone();
        let entry = registry.register(model, Utc::now());
        store.commit(vec![Event::Model {
            entry: entry.clone(),
        }])?;
        Ok(entry)
    }

    /// Registers an existing checkpoint as a candidate.
    pub fn register_checkpoint(
        &self,
        path: &Path,
        metrics: Option<ModelMetrics>,
    ) -> Result<ModelRegistryEntry, ServiceError> {
        let (network, meta) = load_checkpoint_for(path, &self.inner.config.pipeline.architecture)
            .map_err(|e| ServiceError::Model(e.to_string()))?;
        self.register_model(NewModel {
            checkpoint_path: path.to_path_buf(),
            manifest_hash: meta.manifest_hash,
            fingerprint: network.weights_digest(),
            metrics,
            report_path: None,
            run_id: None,
        })
    }

    /// Makes a candidate the production model. The checkpoint is loaded
    /// before any lock is taken; requests already holding the old model
    /// finish on it.
    pub fn promote(
        &self,
        version: u64,
        approver: &str,
    ) -> Result<ModelRegistryEntry, ServiceError> {
        let entry = lock(&self.inner.store)
            .state()
            .registry
            .check_promotion(version)?
            .clone();
        let loaded = Arc::new(self.load(&entry)?);
        let mut store = lock(&self.inner.store);
        let mut registry = store.state().registry.clone();
        let changed = registry.promote(version, approver, Utc::now())?;
        let promoted = changed[0].clone();
        store.commit(
            changed
                .into_iter()
                .map(|entry| Event::Model { entry })
                .collect(),
        )?;
        *self
            .inner
            .production
            .write()
            .unwrap_or_else(|p| p.into_inner()) = Some(loaded);
        tracing::info!(version, approver, "model promoted");
        Ok(promoted)
    }

    // ---- pipeline ----

    pub fn runs(&self) -> Vec<PipelineRun> {
        lock(&self.inner.store)
            .state()
            .runs
            .values()
            .cloned()
            .collect()
    }

    pub fn run(&self, id: u64) -> Result<PipelineRun, ServiceError> {
        lock(&self.inner.store)
            .state()
            .runs
            .get(&id)
            .cloned()
            .ok_or(ServiceError::UnknownRun(id))
    }

    /// Starts a manual run in the background; refused while one is running.
    pub fn start_run(&self, requested_by: Option<String>) -> Result<PipelineRun, ServiceError> {
        let mut queue = lock(&self.inner.runs);
        if let Some(id) = queue.running {
            return Err(ServiceError::PipelineBusy(id));
        }
        let run = self.begin_run(&mut queue, RunTrigger::Manual { requested_by })?;
        Ok(run)
    }

    /// Threshold triggers never get lost: they wait for the current run.
    fn enqueue_run(&self, trigger: RunTrigger) -> Result<(), ServiceError> {
        let mut queue = lock(&self.inner.runs);
        if queue.running.is_some() {
            queue.pending.push_back(trigger);
            return Ok(());
        }
        self.begin_run(&mut queue, trigger)?;
        Ok(())
    }

    fn begin_run(
        &self,
        queue: &mut RunQueue,
        trigger: RunTrigger,
    ) -> Result<PipelineRun, ServiceError> {
        let run = {
            let mut store = lock(&self.inner.store);
            let mut counters = store.state().counters;
            counters.runs_started += 1;
            let run = PipelineRun {
                id: counters.runs_started,
                trigger,
                status: RunStatus::Running,
                steps: Vec::new(),
                failed_step: None,
                candidate_version: None,
                inputs_hash: None,
                input_count: 0,
                started_at: Utc::now(),
                finished_at: None,
            };
            store.commit(vec![
                Event::Counters { counters },
                Event::Run { run: run.clone() },
            ])?;
            run
        };
        queue.running = Some(run.id);
        let service = self.clone();
        let first = run.clone();
        let handle = std::thread::Builder::new()
            .name(format!("pipeline-{}", run.id))
            .spawn(move || service.worker(first))?;
        lock(&self.inner.workers).push(handle);
        Ok(run)
    }

    /// Runs `run`, then whatever was queued behind it.
    fn worker(&self, mut run: PipelineRun) {
        loop {
            if let Err(e) = self.execute(&mut run) {
                tracing::error!(run = run.id, "pipeline run could not be recorded: {e}");
            }
            let mut queue = lock(&self.inner.runs);
            queue.running = None;
            let next = match queue.pending.pop_front() {
                Some(trigger) => self.next_run(&mut queue, trigger),
                None => None,
            };
            match next {
                Some(r) => run = r,
                None => {
                    self.inner.runs_idle.notify_all();
                    return;
                }
            }
        }
    }

    fn next_run(&self, queue: &mut RunQueue, trigger: RunTrigger) -> Option<PipelineRun> {
        let mut store = lock(&self.inner.store);
        let mut counters = store.state().counters;
        counters.runs_started += 1;
        let run = PipelineRun {
            id: counters.runs_started,
            trigger,
            status: RunStatus::Running,
            steps: Vec::new(),
            failed_step: None,
            candidate_version: None,
            inputs_hash: None,
            input_count: 0,
            started_at: Utc::now(),
            finished_at: None,
        };
        match store.commit(vec![
            Event::Counters { counters },
            Event::Run { run: run.clone() },
        ]) {
            Ok(()) => {
                queue.running = Some(run.id);
                Some(run)
            }
            Err(e) => {
                tracing::error!("could not start queued pipeline run: {e}");
                None
            }
        }
    }

    /// Training inputs: the base manifest overlaid with ingested labels.
    fn run_inputs(&self) -> Result<Vec<VideoRecord>, ServiceError> {
        let mut by_id: HashMap<String, usize> = HashMap::new();
        let mut records: Vec<VideoRecord> = Vec::new();
        let mut sources = Vec::new();
        if let Some(base) = &self.inner.config.base_manifest {
            sources.extend(read_manifest(base)?);
        }
        let ingest = self.ingest_manifest_path();
        if ingest.exists() {
            sources.extend(read_manifest(&ingest)?);
        }
        for mut r in sources {
            r.split = None;
            r.seed = None;
            match by_id.get(&r.id) {
                Some(&i) => records[i] = r,
                None => {
                    by_id.insert(r.id.clone(), records.len());
                    records.push(r);
                }
            }
        }
        Ok(records)
    }

    fn execute(&self, run: &mut PipelineRun) -> Result<(), ServiceError> {
        let run_dir = self.state_dir().join("runs").join(run.id.to_string());
        fs::create_dir_all(&run_dir)?;
        let records = self.run_inputs()?;
        write_manifest(run_dir.join("inputs.jsonl"), &records)?;
        let mut ctx = RunContext::new(records, self.inner.config.seed, run_dir);
        run.inputs_hash = Some(ctx.inputs_hash());
        run.input_count = ctx.records.len();
        tracing::info!(
            run = run.id,
            inputs = run.input_count,
            "pipeline run started"
        );
        let (steps, failed) = execute_steps(self.inner.steps.as_ref(), &mut ctx);
        run.steps = steps;
        run.failed_step = failed;
        run.finished_at = Some(Utc::now());
        let mut events = Vec::new();
        let mut store = lock(&self.inner.store);
        run.status = RunStatus::Failed;
        if failed.is_none() {
            match candidate(&ctx, run.id) {
                Some(model) => {
                    let mut registry = store.state().registry.clone();
                    let entry = registry.register(model, Utc::now());
                    run.candidate_version = Some(entry.version);
                    run.status = RunStatus::Succeeded;
                    events.push(Event::Model { entry });
                }
                None => tracing::warn!(run = run.id, "pipeline finished without a checkpoint"),
            }
        }
        events.push(Event::Run { run: run.clone() });
        store.commit(events)?;
        tracing::info!(run = run.id, status = ?run.status, "pipeline run finished");
        Ok(())
    }

    /// Blocks until no run is executing or queued.
    pub fn wait_for_pipeline(&self) {
        let mut queue = lock(&self.inner.runs);
        while queue.running.is_some() || !queue.pending.is_empty() {
            queue = self
                .inner
                .runs_idle
                .wait(queue)
                .unwrap_or_else(|p| p.into_inner());
        }
        drop(queue);
        let handles: Vec<_> = lock(&self.inner.workers).drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
    }

    /// Whether a run is executing right now.
    pub fn pipeline_running(&self) -> Option<u64> {
        lock(&self.inner.runs).running
    }
}

fn ingest_record(record: &InspectionRecord) -> Result<VideoRecord, ServiceError> {
    let label = record.human_label.ok_or_else(|| {
        ServiceError::Corrupt(format!("labeled inspection {} has no label", record.id))
    })?;
    let mut out = VideoRecord::new(record.id.clone(), record.frames_dir.clone(), label);
    out.operator = record.operator.clone();
    out.date = record.labeled_at.map(|t| t.to_rfc3339());
    Ok(out)
}

fn candidate(ctx: &RunContext, run_id: u64) -> Option<NewModel> {
    let checkpoint = ctx.checkpoint.clone()?;
    let metrics = ctx.summary.as_ref().map(|s| ModelMetrics {
        image_accuracy: s.image_metrics.accuracy,
        image_neighbor: s.image_metrics.neighbor,
        video_accuracy: s.video_metrics.accuracy,
        video_neighbor: s.video_metrics.neighbor,
    });
    Some(NewModel {
        checkpoint_path: checkpoint,
        manifest_hash: ctx
            .manifest
            .as_ref()
            .map(|m| m.hash())
            .unwrap_or_else(|| ctx.inputs_hash()),
        fingerprint: ctx
            .network
            .as_ref()
            .map(|n| n.weights_digest())
            .unwrap_or_default(),
        metrics,
        report_path: ctx.report.clone(),
        run_id: Some(run_id),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upload_names_are_sanitized() {
        assert_eq!(
            sanitize_name("frame_001.png").as_deref(),
            Some("frame_001.png")
        );
        assert_eq!(sanitize_name("a/b/frame.png").as_deref(), Some("frame.png"));
        assert_eq!(sanitize_name("../../etc/passwd").as_deref(), Some("passwd"));
        assert_eq!(sanitize_name(".hidden"), None);
        assert_eq!(sanitize_name("..").as_deref(), None);
        assert_eq!(sanitize_name("sp ace.png"), None);
    }
}
