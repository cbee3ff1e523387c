//! Generated FL codebases: the five canonical files and iteration-indexed versions.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SOURCE_EXT: &str = "py";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModuleKind {
    Task,
    Client,
    Strategy,
    Server,
    Runner,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 5] = [
        ModuleKind::Task,
        ModuleKind::Client,
        ModuleKind::Strategy,
        ModuleKind::Server,
        ModuleKind::Runner,
    ];

    /// The four modules the supervisor plans; the runner is synthesized last.
    pub const PLANNED: [ModuleKind; 4] = [
        ModuleKind::Task,
        ModuleKind::Client,
        ModuleKind::Server,
        ModuleKind::Strategy,
    ];

    pub fn stem(self) -> &'static str {
        match self {
            ModuleKind::Task => "task",
            ModuleKind::Client => "client_app",
            ModuleKind::Strategy => "strategy",
            ModuleKind::Server => "server_app",
            ModuleKind::Runner => "run",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.{SOURCE_EXT}", self.stem())
    }

    pub fn from_file_name(name: &str) -> Option<ModuleKind> {
        let stem = name.strip_suffix(SOURCE_EXT)?.strip_suffix('.')?;
        Self::ALL.into_iter().find(|k| k.stem() == stem)
    }

    pub fn label(self) -> &'static str {
        match self {
            ModuleKind::Task => "Task",
            ModuleKind::Client => "Client",
            ModuleKind::Strategy => "Strategy",
            ModuleKind::Server => "Server",
            ModuleKind::Runner => "Runner",
        }
    }

    pub fn parse_label(s: &str) -> Option<ModuleKind> {
        Self::ALL.into_iter().find(|k| k.label().eq_ignore_ascii_case(s.trim()))
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub agent_role: String,
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebaseVersion {
    pub iteration: u32,
    pub files: BTreeMap<String, String>,
    pub provenance: BTreeMap<String, Provenance>,
    pub parent_iteration: Option<u32>,
}

/// Named whole-file replacements produced by the debugger.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PatchSet {
    pub replacements: BTreeMap<String, String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodebaseError {
    #[error("missing source for {0}")]
    MissingSource(String),
    #[error("unknown file name {0}")]
    UnknownFile(String),
    #[error("file {0} is empty")]
    EmptyFile(String),
    #[error("patch set is empty")]
    EmptyPatch,
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

impl CodebaseVersion {
    /// Build C_0 from one source per module kind.
    pub fn integrate(
        sources: &BTreeMap<ModuleKind, (String, Provenance)>,
    ) -> Result<Self, CodebaseError> {
        let mut files = BTreeMap::new();
        let mut provenance = BTreeMap::new();
        for kind in ModuleKind::ALL {
            let (src, prov) = sources
                .get(&kind)
                .ok_or_else(|| CodebaseError::MissingSource(kind.file_name()))?;
            if src.trim().is_empty() {
                return Err(CodebaseError::EmptyFile(kind.file_name()));
            }
            files.insert(kind.file_name(), src.clone());
            provenance.insert(kind.file_name(), prov.clone());
        }
        Ok(Self {
            iteration: 0,
            files,
            provenance,
            parent_iteration: None,
        })
    }

    pub fn file(&self, kind: ModuleKind) -> &str {
        self.files.get(&kind.file_name()).map(String::as_str).unwrap_or("")
    }

    /// C_{i+1}: the named files replaced, every other file byte-identical.
    pub fn apply(&self, patch: &PatchSet) -> Result<Self, CodebaseError> {
        patch.check()?;
        let next = self.iteration + 1;
        let mut out = Self {
            iteration: next,
            files: self.files.clone(),
            provenance: self.provenance.clone(),
            parent_iteration: Some(self.iteration),
        };
        for (name, src) in &patch.replacements {
            out.files.insert(name.clone(), src.clone());
            out.provenance.insert(
                name.clone(),
                Provenance {
                    agent_role: "Debugger".into(),
                    attempt: next,
                },
            );
        }
        Ok(out)
    }

    /// Same files, next iteration index. Used when a patch is rejected.
    pub fn carried_forward(&self) -> Self {
        Self {
            iteration: self.iteration + 1,
            parent_iteration: Some(self.iteration),
            ..self.clone()
        }
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), CodebaseError> {
        let io = |e: std::io::Error, p: &Path| CodebaseError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        };
        std::fs::create_dir_all(dir).map_err(|e| io(e, dir))?;
        for (name, src) in &self.files {
            let p = dir.join(name);
            std::fs::write(&p, src).map_err(|e| io(e, &p))?;
        }
        Ok(())
    }

    /// Reload the files of an iteration directory; provenance is not stored there.
    pub fn read_from(dir: &Path, iteration: u32, parent_iteration: Option<u32>) -> Result<Self, CodebaseError> {
        let mut files = BTreeMap::new();
        for kind in ModuleKind::ALL {
            let p = dir.join(kind.file_name());
            let src = std::fs::read_to_string(&p).map_err(|e| CodebaseError::Io {
                path: p.display().to_string(),
                message: e.to_string(),
            })?;
            files.insert(kind.file_name(), src);
        }
        Ok(Self {
            iteration,
            files,
            provenance: BTreeMap::new(),
            parent_iteration,
        })
    }
}

impl PatchSet {
    pub fn check(&self) -> Result<(), CodebaseError> {
        if self.replacements.is_empty() {
            return Err(CodebaseError::EmptyPatch);
        }
        for (name, src) in &self.replacements {
            if ModuleKind::from_file_name(name).is_none() {
                return Err(CodebaseError::UnknownFile(name.clone()));
            }
            if src.trim().is_empty() {
                return Err(CodebaseError::EmptyFile(name.clone()));
            }
        }
        Ok(())
    }

    pub fn file_names(&self) -> Vec<String> {
        self.replacements.keys().cloned().collect()
    }
}
