//! Rule-based routing of classified inspections.

use serde::{Deserialize, Serialize};
use sewer_core::dataset::MergedLabel;
use sewer_core::eval::VideoPrediction;

use crate::ServiceError;

/// What happens to an inspection after classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriageDecision {
    UrgentClean,
    HumanReview,
    LowPriority,
}

/// Action for confident predictions, per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidentAction {
    UrgentClean,
    LowPriority,
}

impl From<ConfidentAction> for TriageDecision {
    fn from(a: ConfidentAction) -> Self {
        match a {
            ConfidentAction::UrgentClean => TriageDecision::UrgentClean,
            ConfidentAction::LowPriority => TriageDecision::LowPriority,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriageRuleSet {
    /// Predictions below this confidence always go to human review.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Confident action indexed by class (clean .. very_dirty).
    #[serde(default = "default_actions")]
    pub confident: [ConfidentAction; 4],
}

fn default_threshold() -> f64 {
    0.7
}

fn default_actions() -> [ConfidentAction; 4] {
    use ConfidentAction::*;
    [LowPriority, LowPriority, UrgentClean, UrgentClean]
}

impl Default for TriageRuleSet {
    fn default() -> Self {
        Self {
            threshold: default_threshold(),
            confident: default_actions(),
        }
    }
}

impl TriageRuleSet {
    pub fn validate(&self) -> Result<(), ServiceError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ServiceError::InvalidInput(format!(
                "triage threshold {} is outside [0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }

    /// Low confidence wins over class; otherwise the class table decides.
    /// A confidence exactly at the threshold counts as confident.
    pub fn decide(&self, class: MergedLabel, confidence: f64) -> TriageDecision {
        if confidence.is_nan() || confidence < self.threshold {
            TriageDecision::HumanReview
        } else {
            self.confident[class.index()].into()
        }
    }
}

pub fn triage(prediction: &VideoPrediction, rules: &TriageRuleSet) -> TriageDecision {
    rules.decide(prediction.label(), prediction.mean_confidence)
}
