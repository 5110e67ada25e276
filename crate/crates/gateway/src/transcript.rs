//! Append-only session transcript, one JSON record per line.

use std::fs::OpenOptions;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Task,
    LlmReply,
    Plan,
    ValidationErrors,
    Approval,
    Rejection,
    Event,
    Outcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub session: String,
    pub kind: RecordKind,
    pub payload: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug)]
enum Store {
    Memory(Vec<TranscriptRecord>),
    /// One `transcript-YYYY-MM-DD.jsonl` file per UTC day.
    Dir(PathBuf),
}

/// Records are timestamped and written under one lock, so file order and
/// timestamp order agree.
#[derive(Debug)]
pub struct Transcript {
    store: Mutex<Store>,
}

impl Transcript {
    pub fn in_memory() -> Self {
        Transcript { store: Mutex::new(Store::Memory(Vec::new())) }
    }

    pub fn in_dir(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Transcript { store: Mutex::new(Store::Dir(dir)) })
    }

    pub fn file_for(dir: &Path, day: NaiveDate) -> PathBuf {
        dir.join(format!("transcript-{}.jsonl", day.format("%Y-%m-%d")))
    }

    pub fn append(&self, session: &str, kind: RecordKind, payload: impl Into<String>) -> io::Result<()> {
        let mut store = self.store.lock().unwrap();
        let record = TranscriptRecord { session: session.to_string(), kind, payload: payload.into(), timestamp: Utc::now() };
        match &mut *store {
            Store::Memory(records) => records.push(record),
            Store::Dir(dir) => {
                let path = Transcript::file_for(dir, record.timestamp.date_naive());
                let mut line = serde_json::to_string(&record).map_err(io::Error::other)?;
                line.push('\n');
                let mut file = OpenOptions::new().create(true).append(true).open(path)?;
                file.write_all(line.as_bytes())?;
            }
        }
        Ok(())
    }

    /// Like [`append`](Self::append) but only logs a write failure; losing
    /// a transcript line must not stop a flight.
    pub fn record(&self, session: &str, kind: RecordKind, payload: impl Into<String>) {
        if let Err(e) = self.append(session, kind, payload) {
            tracing::error!(session, ?kind, error = %e, "transcript write failed");
        }
    }

    /// Every record, oldest first.
    pub fn records(&self) -> io::Result<Vec<TranscriptRecord>> {
        let store = self.store.lock().unwrap();
        match &*store {
            Store::Memory(records) => Ok(records.clone()),
            Store::Dir(dir) => {
                let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        p.file_name()
                            .and_then(|n| n.to_str())
                            .is_some_and(|n| n.starts_with("transcript-") && n.ends_with(".jsonl"))
                    })
                    .collect();
                files.sort();
                let mut out = Vec::new();
                for path in files {
                    for line in io::BufReader::new(std::fs::File::open(path)?).lines() {
                        let line = line?;
                        if line.trim().is_empty() {
                            continue;
                        }
                        out.push(serde_json::from_str(&line).map_err(io::Error::other)?);
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn records_for(&self, session: &str) -> io::Result<Vec<TranscriptRecord>> {
        Ok(self.records()?.into_iter().filter(|r| r.session == session).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_roundtrip() {
        let t = Transcript::in_memory();
        t.append("a", RecordKind::Task, "take off").unwrap();
        t.append("b", RecordKind::Task, "land").unwrap();
        t.append("a", RecordKind::Plan, "takeoff(1)").unwrap();
        let a = t.records_for("a").unwrap();
        assert_eq!(a.iter().map(|r| r.kind).collect::<Vec<_>>(), vec![RecordKind::Task, RecordKind::Plan]);
        assert!(t.records().unwrap().windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    }

    #[test]
    fn file_is_append_only_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let t = Transcript::in_dir(dir.path()).unwrap();
        t.append("s", RecordKind::Task, "one").unwrap();
        t.append("s", RecordKind::LlmReply, "two\nlines").unwrap();
        drop(t);
        // A second writer appends rather than truncating.
        let t = Transcript::in_dir(dir.path()).unwrap();
        t.append("s", RecordKind::Outcome, "three").unwrap();

        let path = Transcript::file_for(dir.path(), Utc::now().date_naive());
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), 3);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["kind"], "task");
        assert_eq!(first["session"], "s");
        let payloads: Vec<_> = t.records().unwrap().into_iter().map(|r| r.payload).collect();
        assert_eq!(payloads, vec!["one", "two\nlines", "three"]);
    }
}
