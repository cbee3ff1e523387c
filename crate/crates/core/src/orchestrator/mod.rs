//! Run lifecycle: an append-only event log per run, a file store laid out
//! under `$FEDFORGE_HOME/runs/<run_id>/`, and the driver that moves a run
//! through planning, coding and evaluation.

mod engine;
mod events;
mod state;
mod store;

pub use engine::{
    DecisionOutcome, DecisionRequest, Orchestrator, OrchestratorError, RunMeta, RunSettings, ScriptedUser,
    DEFAULT_CODING_MODEL, DEFAULT_PLANNING_MODEL, ITERATION_FILES,
};
pub use events::{kinds, parse_event_log, read_event_log, AppendError, EventLog, IntegrityError, RunEvent, TimeMode};
pub use state::{IterationView, PendingDecision, PlanVersionView, ReplayError, RunPhase, RunSnapshot};
pub use store::{
    is_valid_run_id, plan_file, plan_meta_file, write_atomic, Journal, PendingEvent, RunStore, BLUEPRINT_FILE,
    BLUEPRINT_META_FILE, CALLS_FILE, EVENTS_FILE, HOME_ENV, JOURNAL_FILE, MODULES_DIR, PLANNING_FILE, RUN_FILE,
};
