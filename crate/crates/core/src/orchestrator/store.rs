use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use ulid::Ulid;

use super::events::{AppendError, EventLog, TimeMode};
use crate::clock::LOGICAL_EPOCH_MS;

pub const HOME_ENV: &str = "FEDFORGE_HOME";
pub const RUN_FILE: &str = "run.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const CALLS_FILE: &str = "calls.jsonl";
pub const JOURNAL_FILE: &str = "journal.json";
pub const PLANNING_FILE: &str = "planning.json";
pub const BLUEPRINT_FILE: &str = "blueprint.md";
pub const BLUEPRINT_META_FILE: &str = "blueprint.meta";
pub const MODULES_DIR: &str = "modules";

pub fn plan_file(version: u32) -> String {
    format!("plan.v{version}.md")
}

pub fn plan_meta_file(version: u32) -> String {
    format!("plan.v{version}.meta")
}

/// File-based home of all runs: `<home>/runs/<run_id>/`.
#[derive(Debug, Clone)]
pub struct RunStore {
    home: PathBuf,
}

impl RunStore {
    pub fn new(home: impl Into<PathBuf>) -> Self {
        Self { home: home.into() }
    }

    /// `$FEDFORGE_HOME`, else `./.fedforge`.
    pub fn from_env() -> Self {
        Self::new(std::env::var_os(HOME_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(".fedforge")))
    }

    pub fn home(&self) -> &Path {
        &self.home
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.home.join("runs")
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.runs_dir().join(run_id)
    }

    pub fn exists(&self, run_id: &str) -> bool {
        is_valid_run_id(run_id) && self.run_dir(run_id).join(RUN_FILE).is_file()
    }

    pub fn list(&self) -> io::Result<Vec<String>> {
        let mut out = Vec::new();
        match std::fs::read_dir(self.runs_dir()) {
            Ok(rd) => {
                for e in rd {
                    let name = e?.file_name().to_string_lossy().into_owned();
                    if self.exists(&name) {
                        out.push(name);
                    }
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e),
        }
        out.sort();
        Ok(out)
    }

    /// Create a fresh, exclusively owned run directory. Logical time draws ids
    /// from a seeded generator so a fresh home always yields the same ids.
    pub fn create_run_dir(&self, time: TimeMode, seed: u64) -> io::Result<(String, PathBuf)> {
        std::fs::create_dir_all(self.runs_dir())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..1024 {
            let id = match time {
                TimeMode::Logical => {
                    let random = ((rng.next_u64() as u128) << 64 | rng.next_u64() as u128) & ((1u128 << 80) - 1);
                    Ulid::from_parts(LOGICAL_EPOCH_MS, random)
                }
                TimeMode::System => Ulid::new(),
            }
            .to_string();
            let dir = self.run_dir(&id);
            match std::fs::create_dir(&dir) {
                Ok(()) => return Ok((id, dir)),
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e),
            }
        }
        Err(io::Error::new(io::ErrorKind::AlreadyExists, "could not allocate a run id"))
    }
}

pub fn is_valid_run_id(id: &str) -> bool {
    Ulid::from_string(id).is_ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingEvent {
    pub kind: String,
    pub payload: Value,
}

/// The last committed step: artifacts and events written together, plus the
/// scripted-backend cursors at that point.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Journal {
    pub first_seq: u64,
    pub events: Vec<PendingEvent>,
    pub cursors: BTreeMap<String, u32>,
    /// Run-relative path to file body.
    pub files: BTreeMap<String, String>,
}

pub fn write_atomic(path: &Path, body: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, body)?;
    std::fs::rename(&tmp, path)
}

impl Journal {
    pub fn load(run_dir: &Path) -> io::Result<Option<Journal>> {
        match std::fs::read_to_string(run_dir.join(JOURNAL_FILE)) {
            Ok(t) => serde_json::from_str(&t).map(Some).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Make the step durable, then write its files and append its events.
    pub fn commit(self, run_dir: &Path, log: &EventLog) -> Result<(), AppendError> {
        let body = serde_json::to_vec_pretty(&self).expect("journal serializes");
        write_atomic(&run_dir.join(JOURNAL_FILE), &body)?;
        self.replay(run_dir, log)
    }

    /// Idempotent completion of a committed step after a crash.
    pub fn replay(&self, run_dir: &Path, log: &EventLog) -> Result<(), AppendError> {
        for (rel, body) in &self.files {
            write_atomic(&run_dir.join(rel), body.as_bytes())?;
        }
        for (n, ev) in self.events.iter().enumerate() {
            let seq = self.first_seq + n as u64;
            if seq > log.last_seq() {
                log.append(&ev.kind, ev.payload.clone())?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn logical_ids_are_reproducible_and_unique() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (id1, _) = RunStore::new(a.path()).create_run_dir(TimeMode::Logical, 42).unwrap();
        let (id2, _) = RunStore::new(b.path()).create_run_dir(TimeMode::Logical, 42).unwrap();
        assert_eq!(id1, id2);
        let (id3, _) = RunStore::new(a.path()).create_run_dir(TimeMode::Logical, 42).unwrap();
        assert_ne!(id1, id3);
        assert!(is_valid_run_id(&id1));
        assert!(!is_valid_run_id("../etc"));
    }

    #[test]
    fn concurrent_runs_get_distinct_dirs() {
        let tmp = tempfile::tempdir().unwrap();
        let store = RunStore::new(tmp.path());
        let dirs: Vec<PathBuf> = std::thread::scope(|s| {
            let hs: Vec<_> = (0..16)
                .map(|_| s.spawn(|| store.create_run_dir(TimeMode::Logical, 7).unwrap().1))
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let unique: std::collections::BTreeSet<_> = dirs.iter().collect();
        assert_eq!(unique.len(), 16);
    }

    #[test]
    fn journal_replay_appends_only_missing() {
        let tmp = tempfile::tempdir().unwrap();
        let log = EventLog::open(&tmp.path().join(EVENTS_FILE), TimeMode::Logical).unwrap();
        let j = Journal {
            first_seq: 1,
            events: vec![
                PendingEvent { kind: "a".into(), payload: json!({}) },
                PendingEvent { kind: "b".into(), payload: json!({}) },
            ],
            cursors: BTreeMap::new(),
            files: BTreeMap::from([("x/y.txt".to_string(), "body".to_string())]),
        };
        log.set_halt_after(Some(1));
        assert!(j.clone().commit(tmp.path(), &log).is_err());
        log.set_halt_after(None);
        let loaded = Journal::load(tmp.path()).unwrap().unwrap();
        loaded.replay(tmp.path(), &log).unwrap();
        loaded.replay(tmp.path(), &log).unwrap();
        let kinds: Vec<_> = log.all().into_iter().map(|e| e.kind).collect();
        assert_eq!(kinds, vec!["a", "b"]);
        assert_eq!(std::fs::read_to_string(tmp.path().join("x/y.txt")).unwrap(), "body");
    }
}
