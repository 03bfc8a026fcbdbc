//! Watched drop directory for inspections.
//!
//! A producer copies frames into `inbox/<name>/` and creates `READY` last.
//! Each scan submits every ready directory and moves it to `accepted/` or
//! `rejected/`; a rejected directory gets an `error.txt`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::service::{Service, Submission};
use crate::ServiceError;

pub const READY_MARKER: &str = "READY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InboxOutcome {
    pub name: String,
    pub inspection_id: Option<String>,
    pub error: Option<String>,
}

pub fn inbox_dir(state_dir: &Path) -> PathBuf {
    state_dir.join("inbox")
}

fn ready_dirs(inbox: &Path) -> Result<Vec<PathBuf>, ServiceError> {
    if !inbox.exists() {
        return Ok(Vec::new());
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(inbox)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join(READY_MARKER).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn move_to(src: &Path, parent: &Path) -> Result<PathBuf, ServiceError> {
    fs::create_dir_all(parent)?;
    let name = src.file_name().expect("inbox entries have names");
    let mut dest = parent.join(name);
    let mut n = 1;
    while dest.exists() {
        dest = parent.join(format!("{}-{n}", name.to_string_lossy()));
        n += 1;
    }
    fs::rename(src, &dest)?;
    Ok(dest)
}

/// Submits every ready directory once. Without a production model nothing
/// is touched, so the drops wait for the next scan.
pub fn scan_inbox(service: &Service) -> Result<Vec<InboxOutcome>, ServiceError> {
    let state = service.config().state_dir.clone();
    let inbox = inbox_dir(&state);
    if service.serving_version().is_none() {
        return Ok(Vec::new());
    }
    let mut outcomes = Vec::new();
    for dir in ready_dirs(&inbox)? {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        // Moved first so a crash cannot submit the same drop twice.
        let claimed = move_to(&dir, &state.join("accepted"))?;
        match service.submit(Submission::Directory(claimed.clone())) {
            Ok(record) => outcomes.push(InboxOutcome {
                name,
                inspection_id: Some(record.id),
                error: None,
            }),
            Err(ServiceError::NoProductionModel) => {
                fs::rename(&claimed, &dir)?;
                break;
            }
            Err(e) => {
                let rejected = move_to(&claimed, &state.join("rejected"))?;
                fs::write(rejected.join("error.txt"), e.to_string())?;
                tracing::warn!(drop = %name, "inbox submission rejected: {e}");
                outcomes.push(InboxOutcome {
                    name,
                    inspection_id: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    Ok(outcomes)
}

/// Polls the inbox until the process exits.
pub fn watch_inbox(service: Service, every: Duration) -> std::thread::JoinHandle<()> {
    std::thread::spawn(move || loop {
        if let Err(e) = scan_inbox(&service) {
            tracing::error!("inbox scan failed: {e}");
        }
        std::thread::sleep(every);
    })
}
