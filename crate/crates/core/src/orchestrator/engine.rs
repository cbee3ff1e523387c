use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::events::{kinds, AppendError, EventLog, IntegrityError, RunEvent, TimeMode};
use super::state::{PendingDecision, ReplayError, RunPhase, RunSnapshot};
use super::store::{
    is_valid_run_id, plan_file, plan_meta_file, write_atomic, Journal, PendingEvent, RunStore, BLUEPRINT_FILE,
    BLUEPRINT_META_FILE, CALLS_FILE, EVENTS_FILE, MODULES_DIR, PLANNING_FILE, RUN_FILE,
};
use crate::codebase::{CodebaseVersion, ModuleKind, Provenance};
use crate::codegen::{
    coder_role, default_checker, schedule, Blueprint, Codegen, CodegenConfig, CodegenError, ModuleOutcome,
    RequiredSymbols, ScheduleMode, SyntaxChecker,
};
use crate::eval::{
    iteration_dir, refine_until_certified, DiagnosisFile, DiagnosisRuleset, PatchRecord, ProcessSandbox,
    RefineConfig, RefineEnv, RefineError, RefineObserver, RefineOutcome, RefinementState, Sandbox, SimulationLog,
    CODE_DIR, DEFAULT_N_ROUNDS, DEFAULT_SEED, DEFAULT_T_MAX, DIAGNOSIS_FILE, EVENTS_FILE as SIM_EVENTS_FILE,
    STDERR_FILE, STDOUT_FILE,
};
use crate::llm::{Backend, Gateway, LlmError, Message, RemoteBackend, ScriptedBackend, ToolSet};
use crate::planning::{
    parse_plan, PlanningAgents, PlanningError, PlanningSession, PlanningState, PlanningStep, UserDecision,
    DEFAULT_MAX_REFLECTION_CYCLES, DEFAULT_MAX_TOOL_STEPS,
};
use crate::retrieval::{knowledge_tools, Retriever, StubWebSearch, WebSearch};
use crate::task_spec::{BenchmarkRegistry, ExperimentConfig, TaskQuery};

pub const DEFAULT_PLANNING_MODEL: &str = "gemini-2.5-flash";
pub const DEFAULT_CODING_MODEL: &str = "claude-sonnet-4";

/// Per-iteration files served to clients besides the canonical code files.
pub const ITERATION_FILES: [&str; 4] = [STDOUT_FILE, STDERR_FILE, SIM_EVENTS_FILE, DIAGNOSIS_FILE];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSettings {
    pub t_max: u32,
    pub n_rounds: u32,
    pub seed: u64,
    /// Transcript directory for the scripted backend; remote otherwise.
    pub scripted: Option<PathBuf>,
    /// Logical timestamps and seeded run ids.
    pub deterministic: bool,
    pub advisory_evaluator: bool,
    pub llm_review: bool,
    pub max_reflection_cycles: u32,
    pub max_module_attempts: u32,
    pub planning_model: String,
    pub coding_model: String,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            t_max: DEFAULT_T_MAX,
            n_rounds: DEFAULT_N_ROUNDS,
            seed: DEFAULT_SEED,
            scripted: None,
            deterministic: false,
            advisory_evaluator: false,
            llm_review: false,
            max_reflection_cycles: DEFAULT_MAX_REFLECTION_CYCLES,
            max_module_attempts: crate::codegen::DEFAULT_MAX_MODULE_ATTEMPTS,
            planning_model: DEFAULT_PLANNING_MODEL.into(),
            coding_model: DEFAULT_CODING_MODEL.into(),
        }
    }
}

impl RunSettings {
    /// Offline settings: scripted replies and reproducible ids and timestamps.
    pub fn scripted(dir: impl Into<PathBuf>) -> Self {
        Self { scripted: Some(dir.into()), deterministic: true, ..Self::default() }
    }

    fn time_mode(&self) -> TimeMode {
        if self.deterministic {
            TimeMode::Logical
        } else {
            TimeMode::System
        }
    }

    fn rules(&self) -> DiagnosisRuleset {
        DiagnosisRuleset::for_rounds(self.n_rounds)
    }
}

/// Contents of run.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub query_id: String,
    pub created_at: String,
    pub settings: RunSettings,
    pub query: TaskQuery,
    pub experiment: ExperimentConfig,
    pub parent_run: Option<String>,
    pub prior_context: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub decision: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl DecisionRequest {
    pub fn new(decision: &str) -> Self {
        Self { decision: decision.into(), ..Self::default() }
    }

    pub fn with_feedback(mut self, feedback: impl Into<String>) -> Self {
        self.feedback = Some(feedback.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionOutcome {
    pub snapshot: RunSnapshot,
    pub new_run_id: Option<String>,
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("unknown-query: {0}")]
    UnknownQuery(String),
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error(transparent)]
    Integrity(#[from] IntegrityError),
    #[error("event log cannot be replayed: {0}")]
    Replay(#[from] ReplayError),
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("halted after seq {0}")]
    Halted(u64),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for OrchestratorError {
    fn from(e: std::io::Error) -> Self {
        OrchestratorError::Io(e.to_string())
    }
}

impl From<AppendError> for OrchestratorError {
    fn from(e: AppendError) -> Self {
        match e {
            AppendError::Halted(seq) => OrchestratorError::Halted(seq),
            AppendError::Io(e) => OrchestratorError::Io(e.to_string()),
        }
    }
}

/// Failures of one driver step. Agent and sandbox failures are recorded as
/// run.error and leave the phase unchanged.
enum StepError {
    Recoverable(String),
    Fatal(OrchestratorError),
}

impl<E: Into<OrchestratorError>> From<E> for StepError {
    fn from(e: E) -> Self {
        StepError::Fatal(e.into())
    }
}

fn recoverable(e: impl std::fmt::Display) -> StepError {
    StepError::Recoverable(e.to_string())
}

enum Flow {
    Continue,
    Wait,
}

struct RunHandle {
    dir: PathBuf,
    meta: RunMeta,
    log: Arc<EventLog>,
    commit: Mutex<()>,
    drive: Mutex<()>,
    driving: AtomicBool,
    rerun: AtomicBool,
}

/// Agents for one drive call. Scripted cursors come from the last journal so
/// a resumed process hands out the same replies.
struct Agents {
    backend: Arc<dyn Backend>,
    planning: Gateway,
    coding: Gateway,
    tools: ToolSet,
}

/// Decisions read from `user.<n>.txt` in a transcript directory.
#[derive(Debug, Clone, Default)]
pub struct ScriptedUser {
    decisions: Vec<DecisionRequest>,
}

impl ScriptedUser {
    pub fn load_dir(dir: &Path) -> Result<Self, OrchestratorError> {
        let mut decisions = Vec::new();
        for n in 1.. {
            let p = dir.join(format!("user.{n}.txt"));
            let Ok(text) = std::fs::read_to_string(&p) else { break };
            let d: DecisionRequest = serde_json::from_str(text.trim())
                .map_err(|e| OrchestratorError::Io(format!("{}: {e}", p.display())))?;
            decisions.push(d);
        }
        Ok(Self { decisions })
    }

    pub fn decision(&self, n: usize) -> Option<&DecisionRequest> {
        self.decisions.get(n)
    }
}

pub struct Orchestrator {
    store: RunStore,
    registry: BenchmarkRegistry,
    sandbox: Arc<dyn Sandbox>,
    web: Arc<dyn WebSearch>,
    retriever: Arc<Retriever>,
    checker: Arc<dyn SyntaxChecker>,
    symbols: RequiredSymbols,
    runs: Mutex<HashMap<String, Arc<RunHandle>>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn pretty(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn ev(kind: &str, payload: Value) -> PendingEvent {
    PendingEvent { kind: kind.into(), payload }
}

impl Orchestrator {
    pub fn new(store: RunStore) -> Self {
        Self {
            store,
            registry: BenchmarkRegistry::shipped(),
            sandbox: Arc::new(ProcessSandbox::default()),
            web: Arc::new(StubWebSearch::default()),
            retriever: Arc::new(Retriever::shipped()),
            checker: Arc::from(default_checker()),
            symbols: RequiredSymbols::shipped(),
            runs: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_sandbox(mut self, sandbox: Arc<dyn Sandbox>) -> Self {
        self.sandbox = sandbox;
        self
    }

    pub fn with_web(mut self, web: Arc<dyn WebSearch>) -> Self {
        self.web = web;
        self
    }

    pub fn with_checker(mut self, checker: Arc<dyn SyntaxChecker>) -> Self {
        self.checker = checker;
        self
    }

    pub fn with_registry(mut self, registry: BenchmarkRegistry) -> Self {
        self.registry = registry;
        self
    }

    pub fn store(&self) -> &RunStore {
        &self.store
    }

    pub fn registry(&self) -> &BenchmarkRegistry {
        &self.registry
    }

    /// Create a run: run.json, the initial planning session, and the first
    /// events run.created and plan.drafting.
    pub fn start_run(&self, query_id: &str, settings: RunSettings) -> Result<String, OrchestratorError> {
        self.create_run(query_id, settings, None, None)
    }

    fn create_run(
        &self,
        query_id: &str,
        settings: RunSettings,
        parent_run: Option<String>,
        prior_context: Option<String>,
    ) -> Result<String, OrchestratorError> {
        let entry = self
            .registry
            .get(query_id)
            .ok_or_else(|| OrchestratorError::UnknownQuery(query_id.to_string()))?
            .clone();
        if settings.t_max == 0 || settings.n_rounds == 0 {
            return Err(OrchestratorError::InvalidDecision("t_max and n_rounds must be positive".into()));
        }
        let time = settings.time_mode();
        let (run_id, dir) = self.store.create_run_dir(time, settings.seed)?;
        let meta = RunMeta {
            run_id: run_id.clone(),
            query_id: query_id.to_string(),
            created_at: time.stamp(1),
            settings: settings.clone(),
            query: entry.query.clone(),
            experiment: entry.config.clone(),
            parent_run: parent_run.clone(),
            prior_context: prior_context.clone(),
        };
        let mut session = PlanningSession::new(settings.max_reflection_cycles);
        if let Some(ctx) = &prior_context {
            session.thread.push(Message::user(entry.query.raw_query.clone()));
            session.thread.push(Message::user(ctx.clone()));
        }
        write_atomic(&dir.join(RUN_FILE), pretty(&meta).as_bytes())?;
        let handle = self.handle(&run_id)?;
        let config = json!({
            "experiment": entry.config,
            "t_max": settings.t_max,
            "n_rounds": settings.n_rounds,
            "seed": settings.seed,
            "rules": settings.rules(),
            "backend": if settings.scripted.is_some() { "scripted" } else { "remote" },
            "planning_model": settings.planning_model,
            "coding_model": settings.coding_model,
            "advisory_evaluator": settings.advisory_evaluator,
            "llm_review": settings.llm_review,
            "max_reflection_cycles": settings.max_reflection_cycles,
            "max_module_attempts": settings.max_module_attempts,
        });
        let events = vec![
            ev(
                kinds::RUN_CREATED,
                json!({"run_id": run_id, "query_id": query_id, "parent_run": parent_run, "config": config}),
            ),
            ev(kinds::PLAN_DRAFTING, json!({"version": 1})),
        ];
        let files = BTreeMap::from([(PLANNING_FILE.to_string(), pretty(&session))]);
        self.commit(&handle, BTreeMap::new(), events, files)?;
        Ok(run_id)
    }

    fn handle(&self, run_id: &str) -> Result<Arc<RunHandle>, OrchestratorError> {
        let mut runs = lock(&self.runs);
        if let Some(h) = runs.get(run_id) {
            return Ok(h.clone());
        }
        if !is_valid_run_id(run_id) {
            return Err(OrchestratorError::UnknownRun(run_id.to_string()));
        }
        let dir = self.store.run_dir(run_id);
        let text = std::fs::read_to_string(dir.join(RUN_FILE))
            .map_err(|_| OrchestratorError::UnknownRun(run_id.to_string()))?;
        let meta: RunMeta =
            serde_json::from_str(&text).map_err(|e| OrchestratorError::Io(format!("{RUN_FILE}: {e}")))?;
        let log = Arc::new(EventLog::open(&dir.join(EVENTS_FILE), meta.settings.time_mode())?);
        let h = Arc::new(RunHandle {
            dir,
            meta,
            log,
            commit: Mutex::new(()),
            drive: Mutex::new(()),
            driving: AtomicBool::new(false),
            rerun: AtomicBool::new(false),
        });
        runs.insert(run_id.to_string(), h.clone());
        Ok(h)
    }

    pub fn meta(&self, run_id: &str) -> Result<RunMeta, OrchestratorError> {
        Ok(self.handle(run_id)?.meta.clone())
    }

    pub fn run_dir(&self, run_id: &str) -> Result<PathBuf, OrchestratorError> {
        Ok(self.handle(run_id)?.dir.clone())
    }

    /// Crash injection: appends fail once the log holds `seq` events.
    pub fn set_halt_after(&self, run_id: &str, seq: Option<u64>) -> Result<(), OrchestratorError> {
        self.handle(run_id)?.log.set_halt_after(seq);
        Ok(())
    }

    pub fn snapshot(&self, run_id: &str) -> Result<RunSnapshot, OrchestratorError> {
        let h = self.handle(run_id)?;
        Ok(RunSnapshot::replay(&h.log.all())?)
    }

    pub fn events_since(&self, run_id: &str, from_seq: u64) -> Result<Vec<RunEvent>, OrchestratorError> {
        Ok(self.handle(run_id)?.log.since(from_seq))
    }

    /// Events with seq >= `from_seq`, waiting up to `timeout` for the first.
    pub fn wait_events(
        &self,
        run_id: &str,
        from_seq: u64,
        timeout: Duration,
    ) -> Result<Vec<RunEvent>, OrchestratorError> {
        let log = self.handle(run_id)?.log.clone();
        Ok(log.wait_since(from_seq, timeout))
    }

    fn last_cursors(dir: &Path) -> BTreeMap<String, u32> {
        Journal::load(dir).ok().flatten().map(|j| j.cursors).unwrap_or_default()
    }

    /// Journal, write and append one step. Refused once the run is terminal
    /// unless the events only record a decision.
    fn commit(
        &self,
        h: &RunHandle,
        cursors: BTreeMap<String, u32>,
        events: Vec<PendingEvent>,
        files: BTreeMap<String, String>,
    ) -> Result<(), OrchestratorError> {
        let _g = lock(&h.commit);
        let all = h.log.all();
        if !all.is_empty() {
            let snap = RunSnapshot::replay(&all)?;
            let decision_only = events.iter().all(|e| e.kind == kinds::DECISION || e.kind == kinds::RUN_REPLANNED);
            if snap.phase.is_terminal() && !decision_only {
                return Err(OrchestratorError::InvalidDecision(format!("run is {:?}", snap.phase)));
            }
        }
        let journal = Journal { first_seq: h.log.last_seq() + 1, events, cursors, files };
        journal.commit(&h.dir, &h.log)?;
        Ok(())
    }

    /// Finish a step that was journaled but not fully applied.
    fn recover(&self, h: &RunHandle) -> Result<(), OrchestratorError> {
        let _g = lock(&h.commit);
        if let Some(j) = Journal::load(&h.dir)? {
            j.replay(&h.dir, &h.log)?;
        }
        Ok(())
    }

    fn agents(&self, h: &RunHandle) -> Result<Agents, StepError> {
        let s = &h.meta.settings;
        let calls = h.dir.join(CALLS_FILE);
        let (planning_backend, coding_backend): (Arc<dyn Backend>, Arc<dyn Backend>) = match &s.scripted {
            Some(dir) => {
                let b: Arc<dyn Backend> = Arc::new(ScriptedBackend::load_dir(dir).map_err(recoverable)?);
                (b.clone(), b)
            }
            None => {
                let p = RemoteBackend::from_env(&s.planning_model)
                    .ok_or_else(|| recoverable(LlmError::BadScript("no remote endpoint configured".into())))?;
                let c = RemoteBackend::from_env(&s.coding_model)
                    .ok_or_else(|| recoverable(LlmError::BadScript("no remote endpoint configured".into())))?;
                (Arc::new(p), Arc::new(c))
            }
        };
        planning_backend.fast_forward(&Self::last_cursors(&h.dir));
        let planning = Gateway::new(planning_backend.clone()).with_call_log(&calls)?;
        let coding = Gateway::new(coding_backend).with_call_log(&calls)?;
        let tools = knowledge_tools(self.retriever.clone(), self.web.clone());
        Ok(Agents { backend: planning_backend, planning, coding, tools })
    }

    /// Advance the run until it needs a human decision or is terminal.
    /// Agent and sandbox failures are recorded as run.error and end the call.
    pub fn drive(&self, run_id: &str) -> Result<RunSnapshot, OrchestratorError> {
        let h = self.handle(run_id)?;
        let _d = lock(&h.drive);
        self.recover(&h)?;
        let mut agents: Option<Agents> = None;
        loop {
            let events = h.log.all();
            let snap = RunSnapshot::replay(&events)?;
            if snap.phase.is_terminal() {
                return Ok(snap);
            }
            if agents.is_none() && !self.waiting(&h, &snap)? {
                match self.agents(&h) {
                    Ok(a) => agents = Some(a),
                    Err(e) => {
                        self.record_error(&h, &snap, e)?;
                        return self.snapshot(run_id);
                    }
                }
            }
            let step = match (snap.phase, agents.as_ref()) {
                (_, None) => Ok(Flow::Wait),
                (RunPhase::Planning, Some(a)) => self.planning_step(&h, &snap, &events, a),
                (RunPhase::Coding, Some(a)) => self.coding_step(&h, &snap, &events, a),
                (RunPhase::Evaluating, Some(a)) => self.evaluating_step(&h, &snap, a),
                _ => Ok(Flow::Wait),
            };
            match step {
                Ok(Flow::Continue) => continue,
                Ok(Flow::Wait) => return self.snapshot(run_id),
                Err(e) => {
                    self.record_error(&h, &snap, e)?;
                    return self.snapshot(run_id);
                }
            }
        }
    }

    /// Whether the run waits on a decision that has not been made.
    fn waiting(&self, h: &RunHandle, snap: &RunSnapshot) -> Result<bool, OrchestratorError> {
        if snap.pending_decision.is_some() && snap.unconsumed_decision.is_none() {
            return Ok(true);
        }
        if snap.phase == RunPhase::Planning && snap.unconsumed_decision.is_none() {
            let session = self.session(h)?;
            return Ok(session.state == PlanningState::AwaitingUser);
        }
        Ok(false)
    }

    fn record_error(&self, h: &RunHandle, snap: &RunSnapshot, e: StepError) -> Result<(), OrchestratorError> {
        let abandoned_meanwhile = || RunSnapshot::replay(&h.log.all()).is_ok_and(|s| s.phase.is_terminal());
        match e {
            StepError::Fatal(OrchestratorError::InvalidDecision(_)) if abandoned_meanwhile() => Ok(()),
            StepError::Fatal(e) => Err(e),
            StepError::Recoverable(_) if abandoned_meanwhile() => Ok(()),
            StepError::Recoverable(message) => {
                tracing::warn!(run = %h.meta.run_id, phase = ?snap.phase, %message, "step failed");
                let payload = json!({"phase": snap.phase, "message": message});
                self.commit(h, Self::last_cursors(&h.dir), vec![ev(kinds::RUN_ERROR, payload)], BTreeMap::new())
            }
        }
    }

    /// Resume after a crash or restart: finish the journaled step and drive on.
    /// A terminal run is returned unchanged.
    pub fn resume(&self, run_id: &str) -> Result<RunSnapshot, OrchestratorError> {
        let snap = self.snapshot(run_id)?;
        if snap.phase.is_terminal() {
            return Ok(snap);
        }
        self.drive(run_id)
    }

    fn session(&self, h: &RunHandle) -> Result<PlanningSession, OrchestratorError> {
        let text = std::fs::read_to_string(h.dir.join(PLANNING_FILE))?;
        serde_json::from_str(&text).map_err(|e| OrchestratorError::Io(format!("{PLANNING_FILE}: {e}")))
    }

    fn planning_step(
        &self,
        h: &RunHandle,
        snap: &RunSnapshot,
        events: &[RunEvent],
        a: &Agents,
    ) -> Result<Flow, StepError> {
        let mut session = self.session(h)?;
        let session_file = |s: &PlanningSession| (PLANNING_FILE.to_string(), pretty(s));
        match session.state {
            PlanningState::AwaitingUser => {
                let Some(d) = &snap.unconsumed_decision else { return Ok(Flow::Wait) };
                let text = |k: &str| d.get(k).and_then(Value::as_str).map(str::to_string);
                let decision = text("decision").unwrap_or_default();
                let (user, out) = match decision.as_str() {
                    "approve" => (UserDecision::Approve { note: text("note") }, vec![]),
                    "revise" => {
                        let feedback = text("feedback").unwrap_or_default();
                        (
                            UserDecision::Revise { feedback: feedback.clone() },
                            vec![ev(kinds::PLAN_REVISING, json!({"feedback": feedback}))],
                        )
                    }
                    _ => (UserDecision::Abandon, vec![ev(kinds::RUN_ABANDONED, json!({"phase": "Planning"}))]),
                };
                session.submit_user_decision(user).map_err(recoverable)?;
                let mut out = out;
                if session.state == PlanningState::Approved {
                    let version = session.plan.as_ref().map(|p| p.version).unwrap_or(0);
                    out.push(ev(
                        kinds::PLAN_APPROVED,
                        json!({"version": version, "override": session.approval_override, "note": session.approval_note}),
                    ));
                    out.push(ev(kinds::PHASE_CHANGED, json!({"from": RunPhase::Planning, "to": RunPhase::Coding})));
                }
                let files = BTreeMap::from([session_file(&session)]);
                self.commit(h, Self::last_cursors(&h.dir), out, files)?;
                Ok(Flow::Continue)
            }
            PlanningState::Drafting | PlanningState::Revising | PlanningState::Reflecting => {
                let drafting = session.state != PlanningState::Reflecting;
                if drafting && events.last().map(|e| e.kind.as_str()) != Some(kinds::PLAN_DRAFTING) {
                    let payload = json!({"version": session.next_version()});
                    self.commit(h, Self::last_cursors(&h.dir), vec![ev(kinds::PLAN_DRAFTING, payload)], BTreeMap::new())?;
                }
                let agents = PlanningAgents { gateway: &a.planning, tools: &a.tools, max_tool_steps: DEFAULT_MAX_TOOL_STEPS };
                let next_version = session.next_version();
                let step = match agents.step(&h.meta.query, &h.meta.experiment, &mut session) {
                    Ok(s) => s,
                    Err(PlanningError::Llm(e)) => return Err(recoverable(e)),
                    Err(e) => return Err(recoverable(e)),
                };
                let mut files = BTreeMap::from([session_file(&session)]);
                let mut out = Vec::new();
                match &step {
                    PlanningStep::Drafted { plan, tool_calls } => {
                        files.insert(plan_file(plan.version), plan.raw_text.clone());
                        files.insert(plan_meta_file(plan.version), pretty(plan));
                        out.push(ev(
                            kinds::PLAN_DRAFTED,
                            json!({"version": plan.version, "file": plan_file(plan.version), "tool_calls": tool_calls}),
                        ));
                    }
                    PlanningStep::DraftFailed { diagnostic } => {
                        out.push(ev(kinds::PLAN_DRAFT_FAILED, json!({"version": next_version, "diagnostic": diagnostic})));
                        if let Some(v) = session.verdicts.last() {
                            out.push(verdict_event(v, false));
                        }
                    }
                    PlanningStep::ClarificationRequested { question } => {
                        out.push(ev(kinds::PLAN_CLARIFICATION, json!({"question": question})));
                    }
                    PlanningStep::Verdict { verdict, llm } => out.push(verdict_event(verdict, *llm)),
                    PlanningStep::Idle => return Ok(Flow::Wait),
                }
                if session.state == PlanningState::AwaitingUser {
                    let version = session.plan.as_ref().map(|p| p.version).unwrap_or(0);
                    out.push(ev(
                        kinds::PLAN_AWAITING_USER,
                        json!({"version": version, "complete": session.current_plan_complete(), "clarification": session.clarification}),
                    ));
                }
                self.commit(h, a.backend.cursors(), out, files)?;
                Ok(Flow::Continue)
            }
            PlanningState::Approved => {
                let payload = json!({"from": RunPhase::Planning, "to": RunPhase::Coding});
                self.commit(h, Self::last_cursors(&h.dir), vec![ev(kinds::PHASE_CHANGED, payload)], BTreeMap::new())?;
                Ok(Flow::Continue)
            }
            PlanningState::Abandoned => {
                let payload = json!({"phase": "Planning"});
                self.commit(h, Self::last_cursors(&h.dir), vec![ev(kinds::RUN_ABANDONED, payload)], BTreeMap::new())?;
                Ok(Flow::Continue)
            }
        }
    }

    fn coding_step(
        &self,
        h: &RunHandle,
        snap: &RunSnapshot,
        events: &[RunEvent],
        a: &Agents,
    ) -> Result<Flow, StepError> {
        let s = &h.meta.settings;
        let codegen = Codegen {
            gateway: &a.coding,
            tools: &a.tools,
            checker: self.checker.as_ref(),
            symbols: &self.symbols,
            config: CodegenConfig {
                max_module_attempts: s.max_module_attempts,
                schedule_mode: ScheduleMode::Dependencies,
                llm_review: s.llm_review,
                max_tool_steps: DEFAULT_MAX_TOOL_STEPS,
            },
        };
        if snap.pending_decision == Some(PendingDecision::CodingFailed) {
            let Some(d) = &snap.unconsumed_decision else { return Ok(Flow::Wait) };
            let kind = match d.get("decision").and_then(Value::as_str) {
                Some("approve") => kinds::CODING_RETRY,
                _ => kinds::RUN_ABANDONED,
            };
            self.commit(h, Self::last_cursors(&h.dir), vec![ev(kind, json!({"phase": "Coding"}))], BTreeMap::new())?;
            return Ok(Flow::Continue);
        }
        if !events.iter().any(|e| e.kind == kinds::BLUEPRINT_READY) {
            let version = snap.approved_version.ok_or_else(|| recoverable("no approved plan"))?;
            let raw = std::fs::read_to_string(h.dir.join(plan_file(version)))?;
            let plan = parse_plan(&raw, version).map_err(recoverable)?;
            let bp = codegen.decompose(&plan).map_err(recoverable)?;
            let modules: Vec<&str> = bp.module_plans.keys().map(|k| k.label()).collect();
            let out = vec![ev(kinds::BLUEPRINT_READY, json!({"file": BLUEPRINT_FILE, "modules": modules}))];
            let files = BTreeMap::from([
                (BLUEPRINT_FILE.to_string(), bp.raw_text.clone()),
                (BLUEPRINT_META_FILE.to_string(), pretty(&bp)),
            ]);
            self.commit(h, a.backend.cursors(), out, files)?;
            return Ok(Flow::Continue);
        }
        let bp = Blueprint::parse(&std::fs::read_to_string(h.dir.join(BLUEPRINT_FILE))?).map_err(recoverable)?;
        let mut built: BTreeMap<ModuleKind, (String, Provenance)> = BTreeMap::new();
        for (label, p) in &snap.modules {
            if p.get("status").and_then(Value::as_str) != Some("Stable") {
                continue;
            }
            let Some(kind) = ModuleKind::parse_label(label) else { continue };
            let src = std::fs::read_to_string(h.dir.join(MODULES_DIR).join(kind.file_name()))?;
            let attempt = p.get("attempts").and_then(Value::as_u64).unwrap_or(1) as u32;
            built.insert(kind, (src, Provenance { agent_role: coder_role(kind).key(), attempt }));
        }
        for wave in schedule(ScheduleMode::Dependencies) {
            let todo: Vec<ModuleKind> = wave.into_iter().filter(|k| !built.contains_key(k)).collect();
            if todo.is_empty() {
                continue;
            }
            let sources: BTreeMap<ModuleKind, String> = built.iter().map(|(k, (s, _))| (*k, s.clone())).collect();
            let outcomes = codegen.build_wave(&todo, &bp, &sources).map_err(|e| match e {
                CodegenError::Llm(e) => recoverable(e),
                e => recoverable(e),
            })?;
            let (out, files) = module_events(&outcomes);
            self.commit(h, a.backend.cursors(), out, files)?;
            return Ok(Flow::Continue);
        }
        let codebase = CodebaseVersion::integrate(&built).map_err(recoverable)?;
        let code_dir = Path::new("iterations").join("0").join(CODE_DIR);
        let files: BTreeMap<String, String> = codebase
            .files
            .iter()
            .map(|(name, src)| (code_dir.join(name).to_string_lossy().into_owned(), src.clone()))
            .collect();
        let names: Vec<&String> = codebase.files.keys().collect();
        let out = vec![
            ev(kinds::CODEBASE_INTEGRATED, json!({"iteration": 0, "files": names})),
            ev(kinds::PHASE_CHANGED, json!({"from": RunPhase::Coding, "to": RunPhase::Evaluating})),
        ];
        self.commit(h, a.backend.cursors(), out, files)?;
        Ok(Flow::Continue)
    }

    fn evaluating_step(&self, h: &RunHandle, snap: &RunSnapshot, a: &Agents) -> Result<Flow, StepError> {
        let s = &h.meta.settings;
        let i = snap.current_iteration;
        let state = RefinementState {
            iteration: i,
            t_max: s.t_max,
            history: snap.history().into_iter().filter(|e| e.iteration < i).collect(),
            outcome: RefineOutcome::Running,
        };
        let code_dir = iteration_dir(&h.dir, i).join(CODE_DIR);
        let current = CodebaseVersion::read_from(&code_dir, i, i.checked_sub(1)).map_err(recoverable)?;
        let config = RefineConfig {
            t_max: s.t_max,
            n_rounds: s.n_rounds,
            seed: s.seed,
            rules: s.rules(),
            advisory_evaluator: s.advisory_evaluator,
        };
        let env = RefineEnv {
            sandbox: self.sandbox.as_ref(),
            debugger: &a.coding,
            evaluator: Some(&a.coding),
            root: &h.dir,
            run_handle: &h.meta.run_id,
            config: &config,
        };
        let mut obs = EvalObserver { orch: self, h, backend: a.backend.as_ref(), buffer: Vec::new(), fatal: None };
        match refine_until_certified(&env, state, current, &mut obs) {
            Ok((state, _)) => {
                let mut out = std::mem::take(&mut obs.buffer);
                out.push(match state.outcome {
                    RefineOutcome::Certified => ev(kinds::RUN_CERTIFIED, json!({"iteration": state.iteration})),
                    _ => ev(
                        kinds::RUN_EXHAUSTED,
                        json!({"iteration": state.iteration, "attempts": state.patches_applied()}),
                    ),
                });
                self.commit(h, a.backend.cursors(), out, BTreeMap::new())?;
                Ok(Flow::Continue)
            }
            Err(e) => match obs.fatal.take() {
                Some(fatal) => Err(StepError::Fatal(fatal)),
                None => Err(recoverable(e)),
            },
        }
    }

    /// Record a human decision. Abandon takes effect at once; approve and
    /// revise are consumed by the driver; replan of an exhausted run starts a
    /// linked child run.
    pub fn decide(&self, run_id: &str, req: DecisionRequest) -> Result<DecisionOutcome, OrchestratorError> {
        let h = self.handle(run_id)?;
        let snap = self.snapshot(run_id)?;
        let d = req.decision.as_str();
        if !matches!(d, "approve" | "revise" | "abandon" | "replan") {
            return Err(OrchestratorError::InvalidDecision(format!("unknown decision {d:?}")));
        }
        if d == "revise" && req.feedback.as_deref().map(str::trim).unwrap_or("").is_empty() {
            return Err(OrchestratorError::InvalidDecision("revise needs non-empty feedback".into()));
        }
        let anytime_abandon = d == "abandon" && !snap.phase.is_terminal();
        let allowed = snap.pending_decision.is_some_and(|p| p.allows(d)) && snap.unconsumed_decision.is_none();
        if !allowed && !anytime_abandon {
            return Err(OrchestratorError::InvalidDecision(format!(
                "{d} is not accepted while {:?} (pending: {:?})",
                snap.phase, snap.pending_decision
            )));
        }
        if d == "approve" && snap.pending_decision == Some(PendingDecision::PlanReview) && snap.plans.is_empty() {
            return Err(OrchestratorError::InvalidDecision("no plan has been drafted".into()));
        }
        let mut payload = serde_json::to_value(&req).expect("decision serializes");
        let mut out = Vec::new();
        let mut new_run_id = None;
        if d == "replan" {
            let child = self.create_run(
                &h.meta.query_id,
                h.meta.settings.clone(),
                Some(run_id.to_string()),
                Some(prior_context(&h, &snap, req.feedback.as_deref())),
            )?;
            payload["new_run_id"] = json!(child);
            out.push(ev(kinds::DECISION, payload));
            out.push(ev(kinds::RUN_REPLANNED, json!({"new_run_id": child})));
            new_run_id = Some(child);
        } else {
            out.push(ev(kinds::DECISION, payload));
            if anytime_abandon {
                out.push(ev(kinds::RUN_ABANDONED, json!({"phase": snap.phase})));
            }
        }
        self.commit(&h, Self::last_cursors(&h.dir), out, BTreeMap::new())?;
        Ok(DecisionOutcome { snapshot: self.snapshot(run_id)?, new_run_id })
    }

    /// Drive, answering pending decisions from the transcript's `user.<n>.txt`
    /// files, until the run is terminal or the script has no answer.
    pub fn run_scripted(&self, run_id: &str) -> Result<RunSnapshot, OrchestratorError> {
        let h = self.handle(run_id)?;
        let user = match &h.meta.settings.scripted {
            Some(dir) => ScriptedUser::load_dir(dir)?,
            None => ScriptedUser::default(),
        };
        loop {
            let snap = self.drive(run_id)?;
            if snap.phase.is_terminal() || snap.pending_decision.is_none() || snap.unconsumed_decision.is_some() {
                return Ok(snap);
            }
            let made = h.log.all().iter().filter(|e| e.kind == kinds::DECISION).count();
            match user.decision(made) {
                Some(d) => {
                    self.decide(run_id, d.clone())?;
                }
                None => return Ok(snap),
            }
        }
    }

    /// Drive on a background thread. A request that arrives while a drive is
    /// running makes that drive go around once more.
    pub fn spawn_drive(self: &Arc<Self>, run_id: &str) -> Result<(), OrchestratorError> {
        let h = self.handle(run_id)?;
        h.rerun.store(true, Ordering::SeqCst);
        if h.driving.swap(true, Ordering::SeqCst) {
            return Ok(());
        }
        let me = self.clone();
        let id = run_id.to_string();
        std::thread::spawn(move || loop {
            h.rerun.store(false, Ordering::SeqCst);
            if let Err(e) = me.drive(&id) {
                tracing::error!(run = %id, error = %e, "drive failed");
            }
            h.driving.store(false, Ordering::SeqCst);
            if !h.rerun.load(Ordering::SeqCst) || h.driving.swap(true, Ordering::SeqCst) {
                break;
            }
        });
        Ok(())
    }

    /// Read one persisted file of iteration `i`: a canonical code file or
    /// one of [`ITERATION_FILES`].
    pub fn iteration_file(&self, run_id: &str, i: u32, name: &str) -> Result<Vec<u8>, OrchestratorError> {
        let h = self.handle(run_id)?;
        let dir = iteration_dir(&h.dir, i);
        let path = if ModuleKind::from_file_name(name).is_some() {
            dir.join(CODE_DIR).join(name)
        } else if ITERATION_FILES.contains(&name) {
            dir.join(name)
        } else {
            return Err(OrchestratorError::NotFound(name.to_string()));
        };
        std::fs::read(&path).map_err(|_| OrchestratorError::NotFound(format!("iterations/{i}/{name}")))
    }
}

fn verdict_event(v: &crate::planning::ReflectionVerdict, llm: bool) -> PendingEvent {
    ev(
        kinds::PLAN_VERDICT,
        json!({"version": v.plan_version, "status": v.status, "justification": v.justification, "llm": llm}),
    )
}

fn module_events(outcomes: &[ModuleOutcome]) -> (Vec<PendingEvent>, BTreeMap<String, String>) {
    let mut out = Vec::new();
    let mut files = BTreeMap::new();
    for o in outcomes {
        let kind = o.state.kind;
        for a in o.attempts.iter().filter(|a| !a.passed) {
            out.push(ev(
                kinds::MODULE_ATTEMPT,
                json!({"module": kind.label(), "attempt": a.attempt, "mode": a.mode, "feedback": a.feedback}),
            ));
        }
        match (&o.source, o.is_stable()) {
            (Some(src), true) => {
                let file = format!("{MODULES_DIR}/{}", kind.file_name());
                files.insert(file.clone(), src.clone());
                out.push(ev(
                    kinds::MODULE_STABLE,
                    json!({"module": kind.label(), "attempts": o.state.attempts, "status": "Stable", "file": file}),
                ));
            }
            _ => out.push(ev(
                kinds::MODULE_FAILED,
                json!({"module": kind.label(), "attempts": o.state.attempts, "status": "Failed", "feedback": o.state.test_feedback}),
            )),
        }
    }
    (out, files)
}

fn prior_context(h: &RunHandle, snap: &RunSnapshot, feedback: Option<&str>) -> String {
    let plan = snap
        .approved_version
        .and_then(|v| std::fs::read_to_string(h.dir.join(plan_file(v))).ok())
        .unwrap_or_default();
    let last = snap.iterations.last().map(|it| it.report.reason.clone()).unwrap_or_default();
    let mut text = format!(
        "Previous run {} used all {} correction attempts without a passing simulation.\nLast diagnosis: {last}\nPrevious plan:\n{plan}",
        h.meta.run_id, h.meta.settings.t_max
    );
    if let Some(f) = feedback.filter(|f| !f.trim().is_empty()) {
        text.push_str(&format!("\nUser feedback: {f}"));
    }
    text
}

/// Buffers sim.finished and diagnosis until the iteration ends, so one
/// iteration is one journaled step.
struct EvalObserver<'a> {
    orch: &'a Orchestrator,
    h: &'a RunHandle,
    backend: &'a dyn Backend,
    buffer: Vec<PendingEvent>,
    fatal: Option<OrchestratorError>,
}

impl RefineObserver for EvalObserver<'_> {
    fn on_simulated(&mut self, c: &CodebaseVersion, log: &SimulationLog) -> Result<(), RefineError> {
        self.buffer.push(ev(
            kinds::SIM_FINISHED,
            json!({
                "iteration": c.iteration,
                "return_code": log.return_code,
                "timed_out": log.timed_out,
                "completed_rounds": log.completed_rounds(),
                "events": log.events.len(),
            }),
        ));
        Ok(())
    }

    fn on_diagnosis(&mut self, i: u32, file: &DiagnosisFile) -> Result<(), RefineError> {
        self.buffer.push(ev(
            kinds::DIAGNOSIS,
            json!({"iteration": i, "report": file.report, "advisory_agrees": file.advisory_agrees}),
        ));
        Ok(())
    }

    fn on_patch(&mut self, next: &CodebaseVersion, patch: &PatchRecord) -> Result<(), RefineError> {
        let mut out = std::mem::take(&mut self.buffer);
        out.push(ev(
            kinds::PATCH_APPLIED,
            json!({"iteration": next.iteration, "parent": next.parent_iteration, "files": patch.files, "error": patch.error}),
        ));
        self.orch.commit(self.h, self.backend.cursors(), out, BTreeMap::new()).map_err(|e| {
            let msg = e.to_string();
            self.fatal = Some(e);
            RefineError::Halted(msg)
        })
    }
}
