use std::path::PathBuf;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sewer_core::dataset::RawLabel;
use sewer_core::eval::VideoPrediction;

use crate::triage::TriageDecision;
use crate::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InspectionStatus {
    Received,
    Classified,
    QueuedReview,
    QueuedLow,
    DispatchedUrgent,
    Labeled,
}

impl InspectionStatus {
    pub const ALL: [InspectionStatus; 6] = [
        InspectionStatus::Received,
        InspectionStatus::Classified,
        InspectionStatus::QueuedReview,
        InspectionStatus::QueuedLow,
        InspectionStatus::DispatchedUrgent,
        InspectionStatus::Labeled,
    ];

    /// States a human label may be submitted from.
    pub fn is_queued(self) -> bool {
        matches!(
            self,
            InspectionStatus::QueuedReview
                | InspectionStatus::QueuedLow
                | InspectionStatus::DispatchedUrgent
        )
    }

    /// Edges of the lifecycle diagram.
    pub fn can_become(self, next: InspectionStatus) -> bool {
        use InspectionStatus::*;
        match (self, next) {
            (Received, Classified) => true,
            (Classified, QueuedReview | QueuedLow | DispatchedUrgent) => true,
            (from, Labeled) => from.is_queued(),
            _ => false,
        }
    }

    /// Queue order: urgent work first, then items waiting for review.
    pub fn priority(self) -> u8 {
        match self {
            InspectionStatus::DispatchedUrgent => 0,
            InspectionStatus::QueuedReview => 1,
            InspectionStatus::QueuedLow => 2,
            _ => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InspectionStatus::Received => "received",
            InspectionStatus::Classified => "classified",
            InspectionStatus::QueuedReview => "queued_review",
            InspectionStatus::QueuedLow => "queued_low",
            InspectionStatus::DispatchedUrgent => "dispatched_urgent",
            InspectionStatus::Labeled => "labeled",
        }
    }
}

impl std::str::FromStr for InspectionStatus {
    type Err = ServiceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| ServiceError::InvalidInput(format!("unknown status {s:?}")))
    }
}

impl From<TriageDecision> for InspectionStatus {
    fn from(d: TriageDecision) -> Self {
        match d {
            TriageDecision::UrgentClean => InspectionStatus::DispatchedUrgent,
            TriageDecision::HumanReview => InspectionStatus::QueuedReview,
            TriageDecision::LowPriority => InspectionStatus::QueuedLow,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectionRecord {
    pub id: String,
    /// Directory of the 30 preprocessed frames.
    pub frames_dir: PathBuf,
    /// Where the submitted frames came from.
    pub source_dir: PathBuf,
    pub submitted_at: DateTime<Utc>,
    /// Submission order, used to break timestamp ties.
    pub sequence: u64,
    pub status: InspectionStatus,
    #[serde(default)]
    pub prediction: Option<VideoPrediction>,
    #[serde(default)]
    pub decision: Option<TriageDecision>,
    /// Indices into the 30 frames that were classified.
    #[serde(default)]
    pub classified_frames: Vec<usize>,
    #[serde(default)]
    pub model_version: Option<u64>,
    #[serde(default)]
    pub human_label: Option<RawLabel>,
    #[serde(default)]
    pub operator: Option<String>,
    #[serde(default)]
    pub labeled_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub low_confidence_segment: bool,
}

impl InspectionRecord {
    pub fn transition(&mut self, next: InspectionStatus) -> Result<(), ServiceError> {
        if !self.status.can_become(next) {
            return Err(ServiceError::IllegalTransition {
                id: self.id.clone(),
                from: self.status,
                to: next,
            });
        }
        self.status = next;
        Ok(())
    }
}
