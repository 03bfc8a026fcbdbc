use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetError, MergedLabel, RawLabel};
use crate::model::digest_bytes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

/// One labeled inspection: one line of a manifest file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub frames_dir: PathBuf,
    pub raw_label: RawLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<String>,
}

impl VideoRecord {
    pub fn new(id: impl Into<String>, frames_dir: impl Into<PathBuf>, raw_label: RawLabel) -> Self {
        Self {
            id: id.into(),
            frames_dir: frames_dir.into(),
            raw_label,
            split: None,
            seed: None,
            operator: None,
            date: None,
        }
    }
}

/// A record paired with its post-merge class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledVideo {
    pub record: VideoRecord,
    pub label: MergedLabel,
}

/// Videos with their split assignment and the seed that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub videos: Vec<LabeledVideo>,
    pub seed: u64,
}

impl DatasetManifest {
    /// Builds a manifest from records that already carry a split.
    pub fn from_records(records: Vec<VideoRecord>) -> Result<Self, DatasetError> {
        let seed = records.iter().find_map(|r| r.seed).unwrap_or(0);
        let videos = records
            .into_iter()
            .map(|record| LabeledVideo {
                label: record.raw_label.merged(),
                record,
            })
            .collect();
        let manifest = Self { videos, seed };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Unique ids, unique frame directories, and a split for every video.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut ids = HashSet::new();
        let mut dirs = HashSet::new();
        for v in &self.videos {
            if !ids.insert(v.record.id.as_str()) {
                return Err(DatasetError::DuplicateId(v.record.id.clone()));
            }
            if !dirs.insert(v.record.frames_dir.as_path()) {
                return Err(DatasetError::SharedFrames(v.record.frames_dir.clone()));
            }
            if v.record.split.is_none() {
                return Err(DatasetError::Unsplit(v.record.id.clone()));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &LabeledVideo> {
        self.videos
            .iter()
            .filter(move |v| v.record.split == Some(split))
    }

    /// Per-class video counts of one split.
    pub fn class_counts(&self, split: Split) -> [usize; 4] {
        let mut counts = [0; 4];
        for v in self.split(split) {
            counts[v.label.index()] += 1;
        }
        counts
    }

    pub fn records(&self) -> Vec<VideoRecord> {
        self.videos.iter().map(|v| v.record.clone()).collect()
    }

    /// SHA-256 of the JSON-lines serialization.
    pub fn hash(&self) -> String {
        manifest_hash(&self.records())
    }
}

pub fn manifest_hash(records: &[VideoRecord]) -> String {
    digest_bytes(to_jsonl(records).as_bytes())
}

fn to_jsonl(records: &[VideoRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Reads a JSON-lines manifest; blank lines are skipped. Relative frame
/// directories are resolved against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<VideoRecord>, DatasetError> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut record: VideoRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        if record.frames_dir.is_relative() {
            record.frames_dir = base.join(&record.frames_dir);
        }
        out.push(record);
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[VideoRecord]) -> Result<(), DatasetError> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_jsonl(records))?;
    Ok(())
}

/// Appends one record as a new line.
pub fn append_record(path: impl AsRef<Path>, record: &VideoRecord) -> Result<(), DatasetError> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut line = serde_json::to_string(record).map_err(|e| DatasetError::Parse {
        line: 0,
        message: e.to_string(),
    })?;
    line.push('\n');
    f.write_all(line.as_bytes())?;
    f.sync_data()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_roundtrip_with_optional_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut a = VideoRecord::new("a", dir.path().join("a"), RawLabel::Obstructed);
        a.split = Some(Split::Train);
        a.seed = Some(4);
        let b = VideoRecord::new("b", dir.path().join("b"), RawLabel::Clean);
        write_manifest(&path, &[a.clone()]).unwrap();
        append_record(&path, &b).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), vec![a, b]);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("{\"id\":\"b\""));
        assert!(!text.lines().nth(1).unwrap().contains("split"));
    }

    #[test]
    fn relative_frame_dirs_resolve_against_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(
            &path,
            "{\"id\":\"x\",\"frames_dir\":\"frames/x\",\"raw_label\":\"dirty\"}\n\n",
        )
        .unwrap();
        let records = read_manifest(&path).unwrap();
        assert_eq!(records[0].frames_dir, dir.path().join("frames/x"));
    }

    #[test]
    fn validation_catches_duplicates_and_shared_frames() {
        let mut a = VideoRecord::new("a", "/f/a", RawLabel::Clean);
        a.split = Some(Split::Train);
        let mut dup = a.clone();
        dup.frames_dir = "/f/other".into();
        assert!(matches!(
            DatasetManifest::from_records(vec![a.clone(), dup]),
            Err(DatasetError::DuplicateId(_))
        ));
        let mut shared = a.clone();
        shared.id = "b".into();
        assert!(matches!(
            DatasetManifest::from_records(vec![a, shared]),
            Err(DatasetError::SharedFrames(_))
        ));
    }
}
