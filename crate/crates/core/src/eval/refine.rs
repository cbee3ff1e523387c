use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::debug::{debug_patch, DebugError};
use super::diagnose::{diagnose, DiagnosisReport, DiagnosisRuleset};
use super::evaluator::{llm_evaluate, EvaluatorVerdict};
use super::log::SimulationLog;
use super::sandbox::{Sandbox, SandboxError, SimRequest, EVENTS_FILE, STDERR_FILE, STDOUT_FILE};
use crate::codebase::{CodebaseError, CodebaseVersion};
use crate::llm::{Gateway, LlmError};

pub const DEFAULT_T_MAX: u32 = 10;
pub const DEFAULT_SEED: u64 = 42;
pub const CODE_DIR: &str = "code";
pub const DIAGNOSIS_FILE: &str = "diagnosis.json";

pub fn iteration_dir(root: &Path, i: u32) -> PathBuf {
    root.join("iterations").join(i.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub t_max: u32,
    pub n_rounds: u32,
    pub seed: u64,
    pub rules: DiagnosisRuleset,
    /// Also ask the evaluator agent; its verdict never overrides the rules.
    pub advisory_evaluator: bool,
}

impl RefineConfig {
    pub fn new(t_max: u32, n_rounds: u32) -> Self {
        Self {
            t_max,
            n_rounds,
            seed: DEFAULT_SEED,
            rules: DiagnosisRuleset::for_rounds(n_rounds),
            advisory_evaluator: false,
        }
    }
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self::new(DEFAULT_T_MAX, super::sandbox::DEFAULT_N_ROUNDS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RefineOutcome {
    Certified,
    Exhausted,
    Running,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub files: Vec<String>,
    /// Set when the debugger reply was rejected and C_i was carried forward unchanged.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: u32,
    pub report: DiagnosisReport,
    pub patch: Option<PatchRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementState {
    pub iteration: u32,
    pub t_max: u32,
    pub history: Vec<HistoryEntry>,
    pub outcome: RefineOutcome,
}

impl RefinementState {
    pub fn new(t_max: u32) -> Self {
        Self { iteration: 0, t_max, history: Vec::new(), outcome: RefineOutcome::Running }
    }

    pub fn patches_applied(&self) -> usize {
        self.history.iter().filter(|h| h.patch.is_some()).count()
    }

    pub fn invariant_holds(&self) -> bool {
        let consecutive = self.history.iter().enumerate().all(|(n, h)| h.iteration == n as u32);
        let exhausted_ok = (self.outcome == RefineOutcome::Exhausted)
            == (self.iteration == self.t_max
                && self.outcome != RefineOutcome::Certified
                && self.outcome != RefineOutcome::Running
                && self.history.last().is_some_and(|h| !h.report.is_success()));
        self.iteration <= self.t_max && consecutive && exhausted_ok
    }
}

/// Contents of iterations/<i>/diagnosis.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisFile {
    pub iteration: u32,
    pub report: DiagnosisReport,
    pub advisory: Option<EvaluatorVerdict>,
    pub advisory_agrees: Option<bool>,
}

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("t_max must be at least 1")]
    InvalidTMax,
    #[error("invalid diagnosis ruleset")]
    InvalidRules,
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Codebase(#[from] CodebaseError),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    /// Raised by an observer to stop the loop at an event boundary.
    #[error("halted: {0}")]
    Halted(String),
}

impl RefineError {
    pub fn is_sandbox_unavailable(&self) -> bool {
        matches!(self, RefineError::Sandbox(SandboxError::Unavailable(_)))
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RefineError {
    RefineError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// Hooks for the orchestrator's event log. An `Err` aborts the loop.
pub trait RefineObserver {
    fn on_simulated(&mut self, _c: &CodebaseVersion, _log: &SimulationLog) -> Result<(), RefineError> {
        Ok(())
    }
    fn on_diagnosis(&mut self, _i: u32, _file: &DiagnosisFile) -> Result<(), RefineError> {
        Ok(())
    }
    fn on_patch(&mut self, _next: &CodebaseVersion, _patch: &PatchRecord) -> Result<(), RefineError> {
        Ok(())
    }
}

pub struct NoopObserver;
impl RefineObserver for NoopObserver {}

pub struct RefineEnv<'a> {
    pub sandbox: &'a dyn Sandbox,
    pub debugger: &'a Gateway,
    pub evaluator: Option<&'a Gateway>,
    /// Run directory; iterations live under `<root>/iterations/<i>/`.
    pub root: &'a Path,
    pub run_handle: &'a str,
    pub config: &'a RefineConfig,
}

fn persist_streams(dir: &Path, log: &SimulationLog) -> Result<(), RefineError> {
    for (name, body) in [(STDOUT_FILE, &log.stdout), (STDERR_FILE, &log.stderr)] {
        let p = dir.join(name);
        if !p.exists() {
            std::fs::write(&p, body).map_err(|e| io_err(&p, e))?;
        }
    }
    let p = dir.join(EVENTS_FILE);
    if !p.exists() {
        let lines: String = log.events.iter().map(|e| e.to_line() + "\n").collect();
        std::fs::write(&p, lines).map_err(|e| io_err(&p, e))?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), RefineError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// Simulate, diagnose and repair until certified or out of budget. `state`
/// and `current` may come from a resumed run: the loop continues at
/// `current.iteration` with the given history prefix.
pub fn refine_until_certified(
    env: &RefineEnv<'_>,
    mut state: RefinementState,
    mut current: CodebaseVersion,
    observer: &mut dyn RefineObserver,
) -> Result<(RefinementState, CodebaseVersion), RefineError> {
    let cfg = env.config;
    if cfg.t_max == 0 {
        return Err(RefineError::InvalidTMax);
    }
    if !cfg.rules.is_valid() {
        return Err(RefineError::InvalidRules);
    }
    if state.outcome != RefineOutcome::Running {
        return Ok((state, current));
    }
    env.sandbox.probe()?;
    state.t_max = cfg.t_max;
    loop {
        let i = current.iteration;
        state.iteration = i;
        let dir = iteration_dir(env.root, i);
        let code_dir = dir.join(CODE_DIR);
        for stale in [STDOUT_FILE, STDERR_FILE, EVENTS_FILE, DIAGNOSIS_FILE] {
            let _ = std::fs::remove_file(dir.join(stale));
        }
        current.write_to(&code_dir)?;

        let log = env.sandbox.simulate(&SimRequest {
            run_handle: format!("{}/{i}", env.run_handle),
            code_dir,
            artifacts_dir: dir.clone(),
            n_rounds: cfg.n_rounds,
            seed: cfg.seed,
        })?;
        persist_streams(&dir, &log)?;
        observer.on_simulated(&current, &log)?;

        let report = diagnose(&log, &cfg.rules);
        let advisory = match env.evaluator.filter(|_| cfg.advisory_evaluator) {
            Some(g) => llm_evaluate(g, &log).unwrap_or_else(|e| {
                tracing::warn!(error = %e, "advisory evaluator failed");
                None
            }),
            None => None,
        };
        let advisory_agrees = advisory.as_ref().map(|v| v.success == report.is_success());
        if advisory_agrees == Some(false) {
            tracing::info!(iteration = i, rule = %report.reason, "evaluator disagrees with rule-based diagnosis");
        }
        let file = DiagnosisFile { iteration: i, report: report.clone(), advisory, advisory_agrees };
        write_json(&dir.join(DIAGNOSIS_FILE), &file)?;
        observer.on_diagnosis(i, &file)?;

        if report.is_success() || i >= cfg.t_max {
            state.history.push(HistoryEntry { iteration: i, report: report.clone(), patch: None });
            state.outcome = if report.is_success() { RefineOutcome::Certified } else { RefineOutcome::Exhausted };
            return Ok((state, current));
        }

        let (next, record) = match debug_patch(env.debugger, &current, &report) {
            Ok(patch) => {
                let next = current.apply(&patch)?;
                (next, PatchRecord { files: patch.file_names(), error: None })
            }
            Err(e) if e.is_reply_fault() => {
                tracing::warn!(iteration = i, error = %e, "debugger reply rejected; codebase carried forward");
                (current.carried_forward(), PatchRecord { files: vec![], error: Some(e.to_string()) })
            }
            Err(DebugError::Llm(e)) => return Err(e.into()),
            Err(e) => return Err(RefineError::Halted(e.to_string())),
        };
        next.write_to(&iteration_dir(env.root, next.iteration).join(CODE_DIR))?;
        state.history.push(HistoryEntry { iteration: i, report, patch: Some(record.clone()) });
        observer.on_patch(&next, &record)?;
        current = next;
    }
}
