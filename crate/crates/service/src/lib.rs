//! Production loop around the sewer obstruction grader: submission,
//! classification and triage of inspections, the human labeling queue, the
//! continuous-training pipeline and the model registry, served over HTTP.

pub mod http;
pub mod inbox;
pub mod inspection;
pub mod pipeline;
pub mod registry;
pub mod service;
pub mod store;
pub mod triage;

pub use inspection::{InspectionRecord, InspectionStatus};
pub use pipeline::{
    execute_steps, PipelineConfig, PipelineRun, PipelineStep, PipelineSteps, RunContext, RunStatus,
    RunTrigger, StandardPipeline, StepOutput, StepResult,
};
pub use registry::{ModelMetrics, ModelRegistry, ModelRegistryEntry, ModelStatus, NewModel};
pub use service::{Explanation, FrameExplanation, QueuePage, Service, ServiceConfig, Submission};
pub use triage::{triage, TriageDecision, TriageRuleSet};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Dataset(#[from] sewer_core::dataset::DatasetError),
    #[error("corrupt state: {0}")]
    Corrupt(String),
    #[error("inspection {0:?} not found")]
    NotFound(String),
    #[error("model version {0} not found")]
    UnknownModel(u64),
    #[error("pipeline run {0} not found")]
    UnknownRun(u64),
    #[error("model version {version} is {status:?} and cannot be promoted")]
    NotPromotable { version: u64, status: ModelStatus },
    #[error("inspection {id:?} cannot go from {from:?} to {to:?}")]
    IllegalTransition {
        id: String,
        from: InspectionStatus,
        to: InspectionStatus,
    },
    #[error("no production model is deployed")]
    NoProductionModel,
    #[error("pipeline run {0} is already in progress")]
    PipelineBusy(u64),
    #[error("{0}")]
    InvalidInput(String),
    #[error("invalid frames: {0}")]
    InvalidFrames(String),
    #[error("model error: {0}")]
    Model(String),
}
