//! Append-only JSON-lines event logs, one file per session.
//!
//! Each line is `{"seq", "event", "checksum"}` where the checksum is the hex
//! sha256 of the JSON encoding of `[seq, event]`. A log that fails to parse,
//! skips a sequence number or fails its checksum is moved to `quarantine/`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use mealkit_core::corpus::Vocabulary;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::session::{Event, ReplayError, Session};

pub const LOG_EXTENSION: &str = "jsonl";
pub const QUARANTINE_DIR: &str = "quarantine";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("corrupt log for session {session}: {reason}")]
    CorruptLog { session: String, reason: String },
    #[error("invalid session id {0:?}")]
    InvalidId(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    seq: u64,
    event: Event,
    checksum: String,
}

pub fn checksum(seq: u64, event: &Event) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(&(seq, event)).expect("event serializes")))
}

/// Sessions restored from a store directory.
#[derive(Debug, Default)]
pub struct Restored {
    pub sessions: Vec<Session>,
    pub quarantined: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct EventStore {
    dir: PathBuf,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl EventStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn log_path(&self, id: &str) -> Result<PathBuf, StoreError> {
        if !valid_id(id) {
            return Err(StoreError::InvalidId(id.to_string()));
        }
        Ok(self.dir.join(format!("{id}.{LOG_EXTENSION}")))
    }

    /// Appends event number `seq` (1-based) and syncs it to disk.
    pub fn append(&self, id: &str, seq: u64, event: &Event) -> Result<(), StoreError> {
        let line = LogLine { seq, event: event.clone(), checksum: checksum(seq, event) };
        let mut bytes = serde_json::to_vec(&line)?;
        bytes.push(b'\n');
        let mut f = OpenOptions::new().create(true).append(true).open(self.log_path(id)?)?;
        f.write_all(&bytes)?;
        f.sync_data()?;
        Ok(())
    }

    /// Reads and verifies one session log.
    pub fn read_log(&self, id: &str) -> Result<Vec<Event>, StoreError> {
        let corrupt = |reason: String| StoreError::CorruptLog { session: id.to_string(), reason };
        let f = File::open(self.log_path(id)?)?;
        let mut events = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            let parsed: LogLine = serde_json::from_str(&line).map_err(|e| corrupt(format!("line {}: {e}", i + 1)))?;
            let want = i as u64 + 1;
            if parsed.seq != want {
                return Err(corrupt(format!("line {} has seq {}, expected {want}", i + 1, parsed.seq)));
            }
            if checksum(parsed.seq, &parsed.event) != parsed.checksum {
                return Err(corrupt(format!("checksum mismatch on line {}", i + 1)));
            }
            events.push(parsed.event);
        }
        Ok(events)
    }

    pub fn session_ids(&self) -> Result<Vec<String>, StoreError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let p = entry?.path();
            if p.is_file() && p.extension().is_some_and(|e| e == LOG_EXTENSION) {
                if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                    if valid_id(stem) {
                        ids.push(stem.to_string());
                    }
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    fn quarantine(&self, id: &str) -> Result<(), StoreError> {
        let q = self.dir.join(QUARANTINE_DIR);
        fs::create_dir_all(&q)?;
        fs::rename(self.log_path(id)?, q.join(format!("{id}.{LOG_EXTENSION}")))?;
        Ok(())
    }

    /// Replays every log. Logs that are corrupt or do not replay are
    /// quarantined; the rest are returned.
    pub fn restore(&self, vocab: &Vocabulary) -> Result<Restored, StoreError> {
        let mut out = Restored::default();
        for id in self.session_ids()? {
            let replayed = self.read_log(&id).and_then(|events| {
                Session::replay(&events, vocab).map_err(|e: ReplayError| StoreError::CorruptLog {
                    session: id.clone(),
                    reason: e.to_string(),
                })
            });
            match replayed {
                Ok(s) if s.id == id => out.sessions.push(s),
                Ok(s) => {
                    log::warn!("log {id} holds session {}; quarantined", s.id);
                    self.quarantine(&id)?;
                    out.quarantined.push(id);
                }
                Err(StoreError::CorruptLog { reason, .. }) => {
                    log::warn!("quarantining session {id}: {reason}");
                    self.quarantine(&id)?;
                    out.quarantined.push(id);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }
}
