use std::path::PathBuf;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelStatus {
    Candidate,
    Approved,
    Production,
    Retired,
}

/// Validation metrics recorded when a candidate is registered.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub image_accuracy: f64,
    pub image_neighbor: f64,
    pub video_accuracy: f64,
    pub video_neighbor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistryEntry {
    pub version: u64,
    pub checkpoint_path: PathBuf,
    pub manifest_hash: String,
    /// Digest of the weights, for reproducibility checks.
    pub fingerprint: String,
    #[serde(default)]
    pub metrics: Option<ModelMetrics>,
    #[serde(default)]
    pub report_path: Option<PathBuf>,
    /// Pipeline run that produced the model, if any.
    #[serde(default)]
    pub run_id: Option<u64>,
    pub status: ModelStatus,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub approved_by: Option<String>,
    #[serde(default)]
    pub promoted_at: Option<DateTime<Utc>>,
}

/// Versioned models; versions only grow and at most one is in production.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistry {
    entries: Vec<ModelRegistryEntry>,
}

/// Everything needed to register a candidate.
#[derive(Debug, Clone)]
pub struct NewModel {
    pub checkpoint_path: PathBuf,
    pub manifest_hash: String,
    pub fingerprint: String,
    pub metrics: Option<ModelMetrics>,
    pub report_path: Option<PathBuf>,
    pub run_id: Option<u64>,
}

impl ModelRegistry {
    pub fn entries(&self) -> &[ModelRegistryEntry] {
        &self.entries
    }

    pub fn get(&self, version: u64) -> Option<&ModelRegistryEntry> {
        self.entries.iter().find(|e| e.version == version)
    }

    pub fn production(&self) -> Option<&ModelRegistryEntry> {
        self.entries
            .iter()
            .find(|e| e.status == ModelStatus::Production)
    }

    pub fn next_version(&self) -> u64 {
        self.entries.last().map_or(1, |e| e.version + 1)
    }

    pub fn register(&mut self, model: NewModel, now: DateTime<Utc>) -> ModelRegistryEntry {
        let entry = ModelRegistryEntry {
            version: self.next_version(),
            checkpoint_path: model.checkpoint_path,
            manifest_hash: model.manifest_hash,
            fingerprint: model.fingerprint,
            metrics: model.metrics,
            report_path: model.report_path,
            run_id: model.run_id,
            status: ModelStatus::Candidate,
            created_at: now,
            approved_by: None,
            promoted_at: None,
        };
        self.entries.push(entry.clone());
        entry
    }

    /// Checks a promotion without applying it.
    pub fn check_promotion(&self, version: u64) -> Result<&ModelRegistryEntry, ServiceError> {
        let entry = self
            .get(version)
            .ok_or(ServiceError::UnknownModel(version))?;
        match entry.status {
            ModelStatus::Candidate | ModelStatus::Approved => Ok(entry),
            status => Err(ServiceError::NotPromotable { version, status }),
        }
    }

    /// Candidate to production in one step; the previous production model is
    /// retired. Returns the changed entries, new production first.
    pub fn promote(
        &mut self,
        version: u64,
        approver: &str,
        now: DateTime<Utc>,
    ) -> Result<Vec<ModelRegistryEntry>, ServiceError> {
        if approver.trim().is_empty() {
            return Err(ServiceError::InvalidInput(
                "promotion needs an approver".into(),
            ));
        }
        self.check_promotion(version)?;
        let mut changed = Vec::new();
        for e in &mut self.entries {
            if e.version == version {
                e.status = ModelStatus::Production;
                e.approved_by = Some(approver.to_string());
                e.promoted_at = Some(now);
                changed.insert(0, e.clone());
            } else if e.status == ModelStatus::Production {
                e.status = ModelStatus::Retired;
                changed.push(e.clone());
            }
        }
        Ok(changed)
    }

    /// Inserts or replaces an entry, as when replaying the event log.
    pub fn upsert(&mut self, entry: ModelRegistryEntry) {
        match self.entries.iter_mut().find(|e| e.version == entry.version) {
            Some(e) => *e = entry,
            None => {
                self.entries.push(entry);
                self.entries.sort_by_key(|e| e.version);
            }
        }
    }
}
