//! Phase (c): simulate C_i in the sandbox, diagnose L_i, patch, repeat.

mod debug;
mod diagnose;
mod evaluator;
mod log;
mod refine;
mod sandbox;

pub use debug::{debug_patch, debugger_bindings, DebugError};
pub use diagnose::{
    diagnose, metric_spread, reasons, DiagnosisReport, DiagnosisRuleset, DiagnosisStatus, L2Rules, Layer,
    DEFAULT_MIN_METRIC_DELTA, DEFAULT_MIN_RESULTS, DEFAULT_SIGNATURES,
};
pub use evaluator::{
    evaluator_bindings, llm_evaluate, parse_evaluator_reply, tail_chars, EvaluatorVerdict, STDERR_TAIL_CHARS,
    STDOUT_TAIL_CHARS,
};
pub use log::{parse_events, ParsedEvents, Phase, SimulationLog, StructuredEvent};
pub use refine::{
    iteration_dir, refine_until_certified, DiagnosisFile, HistoryEntry, NoopObserver, PatchRecord, RefineConfig,
    RefineEnv, RefineError, RefineObserver, RefineOutcome, RefinementState, CODE_DIR, DEFAULT_SEED, DEFAULT_T_MAX,
    DIAGNOSIS_FILE,
};
pub use sandbox::{
    ProcessSandbox, Sandbox, SandboxError, ScriptedSandbox, SimLimits, SimRequest, DEFAULT_N_ROUNDS, EVENTS_ENV,
    EVENTS_FILE, EXIT_LIMIT_VIOLATION, EXIT_OK, EXIT_RUNTIME_ERROR, ROUND_LIMIT_ENV, SEED_ENV, STDERR_FILE,
    STDOUT_FILE,
};
