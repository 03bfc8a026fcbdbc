//! Append-only JSON-lines event log with a periodically rewritten snapshot.
//!
//! Every event carries the full new value of what it changed, so replaying a
//! prefix of the log over an older snapshot is idempotent.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::inspection::InspectionRecord;
use crate::pipeline::PipelineRun;
use crate::registry::{ModelRegistry, ModelRegistryEntry};
use crate::ServiceError;

pub const EVENT_LOG: &str = "events.jsonl";
pub const SNAPSHOT: &str = "snapshot.json";
const SNAPSHOT_EVERY: u64 = 100;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub inspections: BTreeMap<String, InspectionRecord>,
    pub registry: ModelRegistry,
    pub runs: BTreeMap<u64, PipelineRun>,
    pub counters: Counters,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Inspections ever submitted; the next id is derived from it.
    pub submitted: u64,
    /// Labels received since the last threshold trigger.
    pub labels_since_trigger: u64,
    pub labeled_total: u64,
    pub runs_started: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Inspection { record: InspectionRecord },
    Model { entry: ModelRegistryEntry },
    Run { run: PipelineRun },
    Counters { counters: Counters },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LoggedEvent {
    seq: u64,
    at: DateTime<Utc>,
    #[serde(flatten)]
    event: Event,
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    last_seq: u64,
    state: State,
}

impl State {
    pub fn apply(&mut self, event: Event) {
        match event {
            Event::Inspection { record } => {
                self.inspections.insert(record.id.clone(), record);
            }
            Event::Model { entry } => self.registry.upsert(entry),
            Event::Run { run } => {
                self.runs.insert(run.id, run);
            }
            Event::Counters { counters } => self.counters = counters,
        }
    }
}

pub struct Store {
    dir: PathBuf,
    log: File,
    seq: u64,
    since_snapshot: u64,
    state: State,
}

impl Store {
    /// Opens or creates the store in `dir`, replaying the log over the
    /// snapshot. A torn final line (crash mid-append) is dropped.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let (mut state, mut seq) = match fs::read(dir.join(SNAPSHOT)) {
            Ok(bytes) => {
                let snap: Snapshot = serde_json::from_slice(&bytes)?;
                (snap.state, snap.last_seq)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => (State::default(), 0),
            Err(e) => return Err(e.into()),
        };
        let log_path = dir.join(EVENT_LOG);
        let mut replayed = 0;
        if log_path.exists() {
            let bytes = fs::read(&log_path)?;
            let mut good = 0;
            let mut offset = 0;
            let lines: Vec<&[u8]> = bytes.split_inclusive(|&b| b == b'\n').collect();
            for (i, line) in lines.iter().enumerate() {
                offset += line.len();
                let complete = line.ends_with(b"\n");
                let text = String::from_utf8_lossy(line);
                if text.trim().is_empty() {
                    good = offset;
                    continue;
                }
                let logged: LoggedEvent = match serde_json::from_str(&text) {
                    Ok(l) if complete => l,
                    Ok(_) | Err(_) if i + 1 == lines.len() => {
                        tracing::warn!("dropping torn event log tail");
                        break;
                    }
                    Err(e) => {
                        return Err(ServiceError::Corrupt(format!(
                            "event log line {}: {e}",
                            i + 1
                        )))
                    }
                    Ok(_) => unreachable!("only the last line can lack a newline"),
                };
                good = offset;
                if logged.seq > seq {
                    seq = logged.seq;
                    state.apply(logged.event);
                    replayed += 1;
                }
            }
            if good < bytes.len() {
                OpenOptions::new()
                    .write(true)
                    .open(&log_path)?
                    .set_len(good as u64)?;
            }
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)?;
        Ok(Self {
            dir,
            log,
            seq,
            since_snapshot: replayed,
            state,
        })
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Appends and applies `events` as one durable write.
    pub fn commit(&mut self, events: Vec<Event>) -> Result<(), ServiceError> {
        if events.is_empty() {
            return Ok(());
        }
        let now = Utc::now();
        let mut buf = Vec::new();
        for (i, event) in events.iter().enumerate() {
            let logged = LoggedEvent {
                seq: self.seq + 1 + i as u64,
                at: now,
                event: event.clone(),
            };
            serde_json::to_writer(&mut buf, &logged)?;
            buf.push(b'\n');
        }
        self.log.write_all(&buf)?;
        self.log.sync_data()?;
        self.seq += events.len() as u64;
        self.since_snapshot += events.len() as u64;
        for event in events {
            self.state.apply(event);
        }
        if self.since_snapshot >= SNAPSHOT_EVERY {
            self.snapshot()?;
        }
        Ok(())
    }

    /// Rewrites the snapshot atomically.
    pub fn snapshot(&mut self) -> Result<(), ServiceError> {
        let snap = Snapshot {
            last_seq: self.seq,
            state: self.state.clone(),
        };
        let tmp = self.dir.join(format!("{SNAPSHOT}.partial"));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&serde_json::to_vec(&snap)?)?;
            f.sync_all()?;
        }
        fs::rename(tmp, self.dir.join(SNAPSHOT))?;
        self.since_snapshot = 0;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counters(n: u64) -> Event {
        Event::Counters {
            counters: Counters {
                submitted: n,
                ..Default::default()
            },
        }
    }

    #[test]
    fn replay_after_reopen_and_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = Store::open(dir.path()).unwrap();
            s.commit(vec![counters(1), counters(2)]).unwrap();
            s.snapshot().unwrap();
            s.commit(vec![counters(3)]).unwrap();
        }
        let s = Store::open(dir.path()).unwrap();
        assert_eq!(s.state().counters.submitted, 3);
        assert_eq!(s.seq, 3);
    }

    #[test]
    fn torn_tail_is_dropped_but_corruption_elsewhere_is_not() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = Store::open(dir.path()).unwrap();
            s.commit(vec![counters(1)]).unwrap();
        }
        let log = dir.path().join(EVENT_LOG);
        let mut f = OpenOptions::new().append(true).open(&log).unwrap();
        f.write_all(b"{\"seq\":2,\"at\":\"20").unwrap();
        drop(f);
        let mut s = Store::open(dir.path()).unwrap();
        assert_eq!(s.state().counters.submitted, 1);
        s.commit(vec![counters(5)]).unwrap();
        drop(s);
        assert_eq!(
            Store::open(dir.path()).unwrap().state().counters.submitted,
            5
        );
        fs::write(&log, "garbage\n{}\n").unwrap();
        assert!(matches!(
            Store::open(dir.path()),
            Err(ServiceError::Corrupt(_))
        ));
        s = {
            fs::write(&log, "").unwrap();
            Store::open(dir.path()).unwrap()
        };
        assert_eq!(s.state().counters.submitted, 0);
    }
}
