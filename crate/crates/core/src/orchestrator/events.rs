use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::clock::{format_ms, Clock, SystemClock, LOGICAL_EPOCH_MS};

pub mod kinds {
    pub const RUN_CREATED: &str = "run.created";
    pub const PHASE_CHANGED: &str = "phase.changed";
    pub const PLAN_DRAFTING: &str = "plan.drafting";
    pub const PLAN_DRAFTED: &str = "plan.drafted";
    pub const PLAN_DRAFT_FAILED: &str = "plan.draft_failed";
    pub const PLAN_CLARIFICATION: &str = "plan.clarification";
    pub const PLAN_VERDICT: &str = "plan.verdict";
    pub const PLAN_AWAITING_USER: &str = "plan.awaiting_user";
    pub const PLAN_APPROVED: &str = "plan.approved";
    pub const PLAN_REVISING: &str = "plan.revising";
    pub const DECISION: &str = "decision";
    pub const BLUEPRINT_READY: &str = "blueprint.ready";
    pub const MODULE_ATTEMPT: &str = "module.attempt";
    pub const MODULE_STABLE: &str = "module.stable";
    pub const MODULE_FAILED: &str = "module.failed";
    pub const CODING_RETRY: &str = "coding.retry";
    pub const CODEBASE_INTEGRATED: &str = "codebase.integrated";
    pub const SIM_FINISHED: &str = "sim.finished";
    pub const DIAGNOSIS: &str = "diagnosis";
    pub const PATCH_APPLIED: &str = "patch.applied";
    pub const RUN_CERTIFIED: &str = "run.certified";
    pub const RUN_EXHAUSTED: &str = "run.exhausted";
    pub const RUN_ABANDONED: &str = "run.abandoned";
    pub const RUN_REPLANNED: &str = "run.replanned";
    pub const RUN_ERROR: &str = "run.error";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub seq: u64,
    pub ts: String,
    pub kind: String,
    pub payload: Value,
}

#[derive(Debug, Error)]
pub enum IntegrityError {
    #[error("events file corrupted at seq {seq} (line {line}): {message}")]
    Corrupt { seq: u64, line: usize, message: String },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

impl IntegrityError {
    pub fn first_bad_seq(&self) -> Option<u64> {
        match self {
            IntegrityError::Corrupt { seq, .. } => Some(*seq),
            IntegrityError::Io { .. } => None,
        }
    }
}

/// Parse an events.jsonl body; seqs must run 1, 2, 3, ... without gaps.
pub fn parse_event_log(text: &str) -> Result<Vec<RunEvent>, IntegrityError> {
    let mut out: Vec<RunEvent> = Vec::new();
    for (n, line) in text.split_inclusive('\n').enumerate() {
        let expected = out.len() as u64 + 1;
        let corrupt = |message: String| IntegrityError::Corrupt { seq: expected, line: n + 1, message };
        if !line.ends_with('\n') {
            return Err(corrupt("unterminated line".into()));
        }
        let ev: RunEvent = serde_json::from_str(line.trim_end()).map_err(|e| corrupt(e.to_string()))?;
        if ev.seq != expected {
            return Err(corrupt(format!("expected seq {expected}, found {}", ev.seq)));
        }
        out.push(ev);
    }
    Ok(out)
}

pub fn read_event_log(path: &Path) -> Result<Vec<RunEvent>, IntegrityError> {
    match std::fs::read_to_string(path) {
        Ok(text) => parse_event_log(&text),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(IntegrityError::Io { path: path.display().to_string(), message: e.to_string() }),
    }
}

/// Where event timestamps come from. Logical time derives the stamp from the
/// seq alone, so replays and resumed runs produce identical logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeMode {
    System,
    Logical,
}

impl TimeMode {
    pub fn stamp(self, seq: u64) -> String {
        match self {
            TimeMode::System => SystemClock.now_rfc3339(),
            TimeMode::Logical => format_ms(LOGICAL_EPOCH_MS + seq * 1000),
        }
    }
}

#[derive(Debug, Error)]
pub enum AppendError {
    #[error("event log io: {0}")]
    Io(#[from] io::Error),
    /// Crash injection: the process is treated as killed after this seq.
    #[error("halted after seq {0}")]
    Halted(u64),
}

struct Inner {
    events: Vec<RunEvent>,
    file: File,
    halt_after: Option<u64>,
}

/// Append-only, gapless event log of one run, mirrored in memory so
/// followers can wait for new entries.
pub struct EventLog {
    path: PathBuf,
    time: TimeMode,
    inner: Mutex<Inner>,
    grew: Condvar,
}

impl EventLog {
    pub fn open(path: &Path, time: TimeMode) -> Result<Self, IntegrityError> {
        let events = read_event_log(path)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| IntegrityError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Ok(Self {
            path: path.to_path_buf(),
            time,
            inner: Mutex::new(Inner { events, file, halt_after: None }),
            grew: Condvar::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn set_halt_after(&self, seq: Option<u64>) {
        self.lock().halt_after = seq;
    }

    pub fn append(&self, kind: &str, payload: Value) -> Result<RunEvent, AppendError> {
        let mut inner = self.lock();
        if let Some(h) = inner.halt_after {
            if inner.events.len() as u64 >= h {
                return Err(AppendError::Halted(h));
            }
        }
        let seq = inner.events.len() as u64 + 1;
        let ev = RunEvent { seq, ts: self.time.stamp(seq), kind: kind.to_string(), payload };
        let mut line = serde_json::to_string(&ev).expect("event serializes");
        line.push('\n');
        inner.file.write_all(line.as_bytes())?;
        inner.file.flush()?;
        inner.events.push(ev.clone());
        drop(inner);
        self.grew.notify_all();
        Ok(ev)
    }

    pub fn last_seq(&self) -> u64 {
        self.lock().events.len() as u64
    }

    pub fn all(&self) -> Vec<RunEvent> {
        self.lock().events.clone()
    }

    pub fn since(&self, from_seq: u64) -> Vec<RunEvent> {
        let inner = self.lock();
        let start = from_seq.saturating_sub(1) as usize;
        inner.events.get(start..).map(<[RunEvent]>::to_vec).unwrap_or_default()
    }

    /// Events with seq >= `from_seq`, waiting up to `timeout` for at least one.
    pub fn wait_since(&self, from_seq: u64, timeout: Duration) -> Vec<RunEvent> {
        let inner = self.lock();
        let (inner, _) = self
            .grew
            .wait_timeout_while(inner, timeout, |i| (i.events.len() as u64) < from_seq.max(1))
            .unwrap_or_else(|e| e.into_inner());
        let start = from_seq.saturating_sub(1) as usize;
        inner.events.get(start..).map(<[RunEvent]>::to_vec).unwrap_or_default()
    }
}
