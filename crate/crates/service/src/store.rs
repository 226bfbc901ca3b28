//! Annotation store: an append-only JSONL event log plus a periodic
//! snapshot. All writes go through one mutex; readers clone what they need.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use clbd_core::text::sha256_hex;

use crate::error::{Result, ServiceError};
use crate::protocol::{AnnotationRecord, Assignment};

pub const LOG_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub raters: Vec<String>,
    pub models: Vec<String>,
    pub task: String,
    pub assignment: Assignment,
    pub shuffle_seed: u64,
    pub open: bool,
    pub created_ms: u64,
    #[serde(default)]
    pub closed_ms: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedItem {
    pub handle: String,
    pub model_id: String,
    pub text: String,
    /// Ranked candidates behind `text`, best first.
    pub candidates: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub id: String,
    #[serde(default)]
    pub session_id: Option<String>,
    pub instance_id: String,
    pub input: String,
    /// In presentation order.
    pub items: Vec<GeneratedItem>,
    pub created_ms: u64,
}

/// A stored HTTP response, replayed on a retry with the same key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredResponse {
    pub status: u16,
    pub body: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    SessionCreated { session: Session },
    SessionClosed { id: String, at_ms: u64 },
    Generated { generation: Generation },
    Annotated { record: AnnotationRecord },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LogEntry {
    seq: u64,
    event: Event,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    idempotency: Option<(String, StoredResponse)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub seq: u64,
    pub sessions: BTreeMap<String, Session>,
    pub generations: BTreeMap<String, Generation>,
    /// handle -> (generation id, item index)
    pub handles: BTreeMap<String, (String, usize)>,
    pub annotations: BTreeMap<String, AnnotationRecord>,
    /// Superseded revisions, oldest first.
    pub history: BTreeMap<String, Vec<AnnotationRecord>>,
    pub idempotency: BTreeMap<String, StoredResponse>,
}

/// Stable id for the single label a rater gives one output.
pub fn annotation_id(session: &str, rater: &str, instance: &str, output: &str) -> String {
    let key = format!("{session}\u{1f}{rater}\u{1f}{instance}\u{1f}{output}");
    format!("ann-{}", &sha256_hex(key.as_bytes())[..16])
}

impl State {
    fn apply(&mut self, seq: u64, event: Event) {
        self.seq = seq;
        match event {
            Event::SessionCreated { session } => {
                self.sessions.insert(session.id.clone(), session);
            }
            Event::SessionClosed { id, at_ms } => {
                if let Some(s) = self.sessions.get_mut(&id) {
                    s.open = false;
                    s.closed_ms = Some(at_ms);
                }
            }
            Event::Generated { generation } => {
                for (i, item) in generation.items.iter().enumerate() {
                    self.handles.insert(item.handle.clone(), (generation.id.clone(), i));
                }
                self.generations.insert(generation.id.clone(), generation);
            }
            Event::Annotated { record } => {
                if let Some(prev) = self.annotations.insert(record.id.clone(), record.clone()) {
                    self.history.entry(record.id).or_default().push(prev);
                }
            }
        }
    }

    pub fn item(&self, handle: &str) -> Option<(&Generation, &GeneratedItem)> {
        let (gid, i) = self.handles.get(handle)?;
        let g = self.generations.get(gid)?;
        Some((g, g.items.get(*i)?))
    }

    /// Current annotations of one session.
    pub fn session_annotations(&self, session: &str) -> Vec<AnnotationRecord> {
        self.annotations.values().filter(|a| a.session_id == session).cloned().collect()
    }
}

struct Inner {
    state: State,
    log: File,
    since_snapshot: usize,
}

pub struct Store {
    dir: PathBuf,
    snapshot_every: usize,
    inner: Mutex<Inner>,
}

/// Outcome of a mutation: either freshly applied or replayed from an
/// earlier request carrying the same idempotency key.
#[derive(Clone, Debug, PartialEq)]
pub enum Commit {
    Applied(StoredResponse),
    Replayed(StoredResponse),
}

impl Commit {
    pub fn response(self) -> StoredResponse {
        match self {
            Commit::Applied(r) | Commit::Replayed(r) => r,
        }
    }
}

impl Store {
    /// Opens or creates the store in `dir`, loading the snapshot and replaying
    /// log entries newer than it.
    pub fn open(dir: impl AsRef<Path>, snapshot_every: usize) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let mut state = match std::fs::read(dir.join(SNAPSHOT_FILE)) {
            Ok(bytes) => serde_json::from_slice::<State>(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => State::default(),
            Err(e) => return Err(e.into()),
        };
        let log_path = dir.join(LOG_FILE);
        let mut replayed = 0;
        if log_path.exists() {
            // Cut a torn final line from a crash mid-write so the next
            // append starts on a fresh line.
            let bytes = std::fs::read(&log_path)?;
            let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            if keep < bytes.len() {
                log::warn!("dropping {} bytes of incomplete log entry", bytes.len() - keep);
                OpenOptions::new().write(true).open(&log_path)?.set_len(keep as u64)?;
            }
            for (n, line) in BufReader::new(File::open(&log_path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: LogEntry = match serde_json::from_str(&line) {
                    Ok(e) => e,
                    Err(e) => return Err(ServiceError::Store(format!("log line {}: {e}", n + 1))),
                };
                if entry.seq <= state.seq {
                    continue;
                }
                if let Some((k, r)) = entry.idempotency {
                    state.idempotency.insert(k, r);
                }
                state.apply(entry.seq, entry.event);
                replayed += 1;
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        Ok(Self {
            dir,
            snapshot_every: snapshot_every.max(1),
            inner: Mutex::new(Inner { state, log, since_snapshot: replayed }),
        })
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Runs `f` against a consistent view of the state.
    pub fn read<T>(&self, f: impl FnOnce(&State) -> T) -> T {
        f(&self.lock().state)
    }

    pub fn stored_response(&self, key: &str) -> Option<StoredResponse> {
        self.lock().state.idempotency.get(key).cloned()
    }

    /// Validates and applies one event under the writer lock. `f` sees the
    /// current state and returns the event plus the response to store; when
    /// `key` was seen before, the stored response comes back and `f` is not
    /// called. Errors from `f` leave the store untouched, and so does a
    /// `None` event (the response is returned but not remembered).
    pub fn mutate<E>(
        &self,
        key: Option<&str>,
        f: impl FnOnce(&State) -> std::result::Result<(Option<Event>, StoredResponse), E>,
    ) -> std::result::Result<Commit, E>
    where
        E: From<ServiceError>,
    {
        let mut inner = self.lock();
        if let Some(r) = key.and_then(|k| inner.state.idempotency.get(k)) {
            return Ok(Commit::Replayed(r.clone()));
        }
        let (event, response) = f(&inner.state)?;
        let Some(event) = event else { return Ok(Commit::Applied(response)) };
        let entry = LogEntry {
            seq: inner.state.seq + 1,
            event,
            idempotency: key.map(|k| (k.to_string(), response.clone())),
        };
        let mut line = serde_json::to_string(&entry).map_err(ServiceError::from)?;
        line.push('\n');
        inner.log.write_all(line.as_bytes()).map_err(ServiceError::from)?;
        inner.log.flush().map_err(ServiceError::from)?;
        if let Some((k, r)) = entry.idempotency {
            inner.state.idempotency.insert(k, r);
        }
        inner.state.apply(entry.seq, entry.event);
        inner.since_snapshot += 1;
        if inner.since_snapshot >= self.snapshot_every {
            self.write_snapshot(&inner.state)?;
            inner.since_snapshot = 0;
        }
        Ok(Commit::Applied(response))
    }

    fn write_snapshot(&self, state: &State) -> Result<()> {
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        let bytes = serde_json::to_vec(state)?;
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, self.dir.join(SNAPSHOT_FILE))
            .map_err(|e| ServiceError::Store(format!("snapshot rename failed: {e}")))
    }

    /// Forces a snapshot of the current state.
    pub fn snapshot(&self) -> Result<()> {
        let mut inner = self.lock();
        self.write_snapshot(&inner.state)?;
        inner.since_snapshot = 0;
        Ok(())
    }
}
