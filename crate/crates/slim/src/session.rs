//! Annotation sessions persisted as `sessions/{id}/session.json` plus an
//! append-only `labels.jsonl` log. Opening a session replays its log.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use slim_core::spread::{AttentionLabel, AttentionValue, LabelSource};

use crate::error::Error;
use crate::store::{dedup_preserving_order, read_json, write_json, Manifest};

pub const SESSION_FILE: &str = "session.json";
pub const LABEL_LOG: &str = "labels.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("`{0}` is not in the manifest")]
    UnknownId(String),
    #[error("`{0}` is not queued in this session")]
    NotQueued(String),
    #[error("`{0}` is already labeled")]
    Duplicate(String),
    #[error("a session needs at least one id")]
    Empty,
    #[error("{}: corrupt label log at line {line}: {message}", path.display())]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Store(#[from] Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Open,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub queue: Vec<String>,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStatus {
    pub session_id: String,
    pub total: usize,
    pub labeled: usize,
    pub state: SessionState,
    pub created_at: u64,
    pub updated_at: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct LogLine {
    id: String,
    value: AttentionValue,
    source: LabelSource,
    at: u64,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

#[derive(Clone, Debug)]
pub struct Session {
    meta: SessionMeta,
    dir: PathBuf,
    /// In submission order.
    labels: Vec<AttentionLabel>,
    labeled: HashSet<String>,
    queued: HashSet<String>,
    updated_at: u64,
}

impl Session {
    pub fn id(&self) -> &str {
        &self.meta.session_id
    }

    pub fn queue(&self) -> &[String] {
        &self.meta.queue
    }

    /// In submission order.
    pub fn labels(&self) -> &[AttentionLabel] {
        &self.labels
    }

    /// Labels sorted by id.
    pub fn sorted_labels(&self) -> Vec<AttentionLabel> {
        let mut l = self.labels.clone();
        l.sort_by(|a, b| a.id.cmp(&b.id));
        l
    }

    pub fn state(&self) -> SessionState {
        if self.labels.len() == self.meta.queue.len() {
            SessionState::Complete
        } else {
            SessionState::Open
        }
    }

    pub fn status(&self) -> SessionStatus {
        SessionStatus {
            session_id: self.meta.session_id.clone(),
            total: self.meta.queue.len(),
            labeled: self.labels.len(),
            state: self.state(),
            created_at: self.meta.created_at,
            updated_at: self.updated_at,
        }
    }

    /// First unlabeled id in queue order.
    pub fn next(&self) -> Option<&str> {
        self.meta.queue.iter().find(|id| !self.labeled.contains(*id)).map(String::as_str)
    }

    fn check(&self, id: &str) -> Result<(), SessionError> {
        if !self.queued.contains(id) {
            return Err(SessionError::NotQueued(id.to_string()));
        }
        if self.labeled.contains(id) {
            return Err(SessionError::Duplicate(id.to_string()));
        }
        Ok(())
    }

    /// Appends the label to the log and syncs it to disk before recording it.
    pub fn submit(&mut self, id: &str, value: AttentionValue, source: LabelSource) -> Result<(), SessionError> {
        self.check(id)?;
        let line = LogLine { id: id.to_string(), value, source, at: now_ms() };
        let mut bytes = serde_json::to_vec(&line).expect("label serializes");
        bytes.push(b'\n');
        let path = self.dir.join(LABEL_LOG);
        let append = || -> io::Result<()> {
            let mut f = OpenOptions::new().append(true).open(&path)?;
            f.write_all(&bytes)?;
            f.sync_data()
        };
        append().map_err(|e| Error::io(&path, e))?;
        self.apply(line);
        Ok(())
    }

    fn apply(&mut self, line: LogLine) {
        self.labeled.insert(line.id.clone());
        self.updated_at = self.updated_at.max(line.at);
        self.labels.push(AttentionLabel { id: line.id, value: line.value, source: line.source });
    }
}

#[derive(Clone, Debug)]
pub struct SessionStore {
    dir: PathBuf,
}

impl SessionStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// Session ids, ascending.
    pub fn list(&self) -> Vec<String> {
        let mut ids: Vec<String> = fs::read_dir(&self.dir)
            .into_iter()
            .flatten()
            .flatten()
            .filter(|e| e.path().join(SESSION_FILE).is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        ids.sort();
        ids
    }

    /// Persists a new open session over `ids` (repeats dropped, first
    /// occurrence kept) before returning it.
    pub fn create(&self, ids: Vec<String>, manifest: &Manifest) -> Result<Session, SessionError> {
        let queue = dedup_preserving_order(ids);
        if queue.is_empty() {
            return Err(SessionError::Empty);
        }
        if let Some(bad) = queue.iter().find(|id| !manifest.contains(id)) {
            return Err(SessionError::UnknownId(bad.clone()));
        }
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let mut n = self.list().len() + 1;
        let (session_id, dir) = loop {
            let sid = format!("s{n:04}");
            let dir = self.dir.join(&sid);
            match fs::create_dir(&dir) {
                Ok(()) => break (sid, dir),
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => n += 1,
                Err(e) => return Err(Error::io(&dir, e).into()),
            }
        };
        let log = dir.join(LABEL_LOG);
        File::create(&log).and_then(|f| f.sync_all()).map_err(|e| Error::io(&log, e))?;
        let meta = SessionMeta { session_id, queue, created_at: now_ms() };
        write_json(&dir.join(SESSION_FILE), &meta)?;
        if let Ok(d) = File::open(&dir) {
            let _ = d.sync_all();
        }
        Ok(Self::build(meta, dir))
    }

    fn build(meta: SessionMeta, dir: PathBuf) -> Session {
        Session {
            queued: meta.queue.iter().cloned().collect(),
            updated_at: meta.created_at,
            labels: Vec::new(),
            labeled: HashSet::new(),
            meta,
            dir,
        }
    }

    /// Rebuilds a session from disk. A final log line cut short by a crash is
    /// discarded (and truncated away so later appends stay well formed).
    pub fn open(&self, session_id: &str) -> Result<Session, SessionError> {
        let valid =
            !session_id.is_empty() && session_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        let dir = self.dir.join(session_id);
        if !valid || !dir.join(SESSION_FILE).is_file() {
            return Err(SessionError::UnknownSession(session_id.to_string()));
        }
        let meta: SessionMeta = read_json(&dir.join(SESSION_FILE))?;
        let mut session = Self::build(meta, dir.clone());
        let log = dir.join(LABEL_LOG);
        let bytes = fs::read(&log).map_err(|e| Error::io(&log, e))?;
        let complete_len = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        for (i, raw) in bytes[..complete_len].split(|&b| b == b'\n').enumerate() {
            if raw.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            let corrupt = |message: String| SessionError::Corrupt { path: log.clone(), line: i + 1, message };
            let line: LogLine = serde_json::from_slice(raw).map_err(|e| corrupt(e.to_string()))?;
            session.check(&line.id).map_err(|e| corrupt(e.to_string()))?;
            session.apply(line);
        }
        if complete_len < bytes.len() {
            log::warn!("{}: discarding a torn final line", log.display());
            truncate(&log, complete_len as u64)?;
        }
        Ok(session)
    }

    /// Most recent complete session whose queue is exactly `queue`.
    pub fn find_complete(&self, queue: &[String]) -> Result<Option<Session>, SessionError> {
        for sid in self.list().into_iter().rev() {
            let s = self.open(&sid)?;
            if s.queue() == queue && s.state() == SessionState::Complete {
                return Ok(Some(s));
            }
        }
        Ok(None)
    }
}

fn truncate(path: &Path, len: u64) -> Result<(), Error> {
    let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
    f.set_len(len).and_then(|()| f.sync_all()).map_err(|e| Error::io(path, e))
}
