use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::events::{kinds, RunEvent};
use crate::eval::{DiagnosisReport, DiagnosisStatus, HistoryEntry, Layer, PatchRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RunPhase {
    Planning,
    Coding,
    Evaluating,
    Certified,
    Exhausted,
    Abandoned,
}

impl RunPhase {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunPhase::Certified | RunPhase::Exhausted | RunPhase::Abandoned)
    }

    pub fn can_move_to(self, next: RunPhase) -> bool {
        use RunPhase::*;
        match (self, next) {
            (Planning, Coding) | (Coding, Evaluating) | (Evaluating, Certified) | (Evaluating, Exhausted) => true,
            (from, Abandoned) => !from.is_terminal(),
            _ => false,
        }
    }

    pub fn parse(s: &str) -> Option<RunPhase> {
        Some(match s {
            "Planning" => RunPhase::Planning,
            "Coding" => RunPhase::Coding,
            "Evaluating" => RunPhase::Evaluating,
            "Certified" => RunPhase::Certified,
            "Exhausted" => RunPhase::Exhausted,
            "Abandoned" => RunPhase::Abandoned,
            _ => return None,
        })
    }
}

/// What the run waits on a human for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PendingDecision {
    PlanReview,
    CodingFailed,
    Exhausted,
}

impl PendingDecision {
    pub fn allows(self, decision: &str) -> bool {
        match self {
            PendingDecision::PlanReview => matches!(decision, "approve" | "revise" | "abandon"),
            PendingDecision::CodingFailed => matches!(decision, "approve" | "abandon"),
            PendingDecision::Exhausted => matches!(decision, "replan" | "abandon"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanVersionView {
    pub version: u32,
    pub file: String,
    pub verdicts: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationView {
    pub iteration: u32,
    pub report: DiagnosisReport,
    pub patch: Option<PatchRecord>,
    pub sim: Option<Value>,
}

/// Everything about a run that the event log determines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub run_id: String,
    pub query_id: String,
    pub phase: RunPhase,
    pub created_at: String,
    pub updated_at: String,
    pub last_seq: u64,
    pub config: Value,
    pub parent_run: Option<String>,
    pub replanned_as: Option<String>,
    pub planning_state: Option<String>,
    pub plans: Vec<PlanVersionView>,
    pub approved_version: Option<u32>,
    pub pending_decision: Option<PendingDecision>,
    /// A decision event the driver has not acted on yet.
    pub unconsumed_decision: Option<Value>,
    pub modules: BTreeMap<String, Value>,
    pub iterations: Vec<IterationView>,
    /// Iteration the evaluation loop runs next (or ran last).
    pub current_iteration: u32,
    pub last_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReplayError {
    #[error("event log is empty")]
    Empty,
    #[error("seq {seq}: first event must be run.created")]
    NoCreation { seq: u64 },
    #[error("seq {seq}: illegal phase change {from:?} -> {to:?}")]
    IllegalTransition { seq: u64, from: RunPhase, to: RunPhase },
    #[error("seq {seq}: malformed {kind} payload")]
    Payload { seq: u64, kind: String },
}

fn s(v: &Value, key: &str) -> Option<String> {
    v.get(key).and_then(Value::as_str).map(str::to_string)
}

fn u(v: &Value, key: &str) -> Option<u32> {
    v.get(key).and_then(Value::as_u64).map(|x| x as u32)
}

impl RunSnapshot {
    /// Fold the event log into the run state.
    pub fn replay(events: &[RunEvent]) -> Result<Self, ReplayError> {
        let first = events.first().ok_or(ReplayError::Empty)?;
        if first.kind != kinds::RUN_CREATED {
            return Err(ReplayError::NoCreation { seq: first.seq });
        }
        let p = &first.payload;
        let mut snap = RunSnapshot {
            run_id: s(p, "run_id").unwrap_or_default(),
            query_id: s(p, "query_id").unwrap_or_default(),
            phase: RunPhase::Planning,
            created_at: first.ts.clone(),
            updated_at: first.ts.clone(),
            last_seq: first.seq,
            config: p.get("config").cloned().unwrap_or(Value::Null),
            parent_run: s(p, "parent_run"),
            replanned_as: None,
            planning_state: Some("Drafting".into()),
            plans: Vec::new(),
            approved_version: None,
            pending_decision: None,
            unconsumed_decision: None,
            modules: BTreeMap::new(),
            iterations: Vec::new(),
            current_iteration: 0,
            last_error: None,
        };
        let mut pending_sim: Option<Value> = None;
        for ev in &events[1..] {
            snap.apply(ev, &mut pending_sim)?;
        }
        Ok(snap)
    }

    fn go(&mut self, seq: u64, to: RunPhase) -> Result<(), ReplayError> {
        if !self.phase.can_move_to(to) {
            return Err(ReplayError::IllegalTransition { seq, from: self.phase, to });
        }
        self.phase = to;
        Ok(())
    }

    fn apply(&mut self, ev: &RunEvent, pending_sim: &mut Option<Value>) -> Result<(), ReplayError> {
        let p = &ev.payload;
        let bad = || ReplayError::Payload { seq: ev.seq, kind: ev.kind.clone() };
        self.last_seq = ev.seq;
        self.updated_at = ev.ts.clone();
        if ev.kind != kinds::RUN_ERROR {
            self.last_error = None;
        }
        match ev.kind.as_str() {
            kinds::PHASE_CHANGED => {
                let to = s(p, "to").and_then(|t| RunPhase::parse(&t)).ok_or_else(bad)?;
                self.go(ev.seq, to)?;
            }
            kinds::PLAN_DRAFTING => {
                if self.planning_state.as_deref() != Some("Revising") {
                    self.planning_state = Some("Drafting".into());
                }
            }
            kinds::PLAN_DRAFTED => {
                let version = u(p, "version").ok_or_else(bad)?;
                self.plans.push(PlanVersionView { version, file: s(p, "file").unwrap_or_default(), verdicts: vec![] });
                self.planning_state = Some("Reflecting".into());
            }
            kinds::PLAN_DRAFT_FAILED | kinds::PLAN_CLARIFICATION => self.planning_state = Some("Reflecting".into()),
            kinds::PLAN_VERDICT => {
                let version = u(p, "version").unwrap_or(0);
                if let Some(plan) = self.plans.iter_mut().find(|pl| pl.version == version) {
                    plan.verdicts.push(p.clone());
                }
                if s(p, "status").as_deref() == Some("INCOMPLETE") {
                    self.planning_state = Some("Drafting".into());
                }
            }
            kinds::PLAN_AWAITING_USER => {
                self.planning_state = Some("AwaitingUser".into());
                self.pending_decision = Some(PendingDecision::PlanReview);
            }
            kinds::DECISION => {
                self.pending_decision = None;
                self.unconsumed_decision = Some(p.clone());
                if let Some(child) = s(p, "new_run_id") {
                    self.replanned_as = Some(child);
                }
            }
            kinds::PLAN_APPROVED => {
                self.unconsumed_decision = None;
                self.planning_state = Some("Approved".into());
                self.approved_version = u(p, "version");
            }
            kinds::PLAN_REVISING => {
                self.unconsumed_decision = None;
                self.planning_state = Some("Revising".into());
            }
            kinds::BLUEPRINT_READY => {}
            kinds::MODULE_ATTEMPT => {
                let m = s(p, "module").ok_or_else(bad)?;
                self.modules.insert(m, p.clone());
            }
            kinds::MODULE_STABLE | kinds::MODULE_FAILED => {
                let m = s(p, "module").ok_or_else(bad)?;
                self.modules.insert(m, p.clone());
                if ev.kind == kinds::MODULE_FAILED {
                    self.pending_decision = Some(PendingDecision::CodingFailed);
                }
            }
            kinds::CODING_RETRY => {
                self.unconsumed_decision = None;
                self.modules.retain(|_, v| v.get("status").and_then(Value::as_str) == Some("Stable"));
            }
            kinds::CODEBASE_INTEGRATED => {}
            kinds::SIM_FINISHED => *pending_sim = Some(p.clone()),
            kinds::DIAGNOSIS => {
                let iteration = u(p, "iteration").ok_or_else(bad)?;
                let report: DiagnosisReport =
                    serde_json::from_value(p.get("report").cloned().ok_or_else(bad)?).map_err(|_| bad())?;
                self.iterations.retain(|it| it.iteration < iteration);
                self.iterations.push(IterationView { iteration, report, patch: None, sim: pending_sim.take() });
                self.current_iteration = iteration;
            }
            kinds::PATCH_APPLIED => {
                let record: PatchRecord = serde_json::from_value(p.clone()).map_err(|_| bad())?;
                if let Some(last) = self.iterations.last_mut() {
                    last.patch = Some(record);
                }
                self.current_iteration = u(p, "iteration").ok_or_else(bad)?;
            }
            kinds::RUN_CERTIFIED => self.go(ev.seq, RunPhase::Certified)?,
            kinds::RUN_EXHAUSTED => {
                self.go(ev.seq, RunPhase::Exhausted)?;
                self.pending_decision = Some(PendingDecision::Exhausted);
            }
            kinds::RUN_ABANDONED => {
                self.unconsumed_decision = None;
                self.pending_decision = None;
                self.go(ev.seq, RunPhase::Abandoned)?;
                if self.planning_state.is_some() && self.approved_version.is_none() {
                    self.planning_state = Some("Abandoned".into());
                }
            }
            kinds::RUN_REPLANNED => {
                self.unconsumed_decision = None;
                self.pending_decision = None;
                self.replanned_as = s(p, "new_run_id");
            }
            kinds::RUN_ERROR => self.last_error = s(p, "message"),
            _ => {}
        }
        Ok(())
    }

    /// Finished iterations as the refinement loop records them.
    pub fn history(&self) -> Vec<HistoryEntry> {
        self.iterations
            .iter()
            .map(|it| HistoryEntry { iteration: it.iteration, report: it.report.clone(), patch: it.patch.clone() })
            .collect()
    }

    pub fn is_certified(&self) -> bool {
        self.phase == RunPhase::Certified
            && self.iterations.last().is_some_and(|it| {
                it.report.status == DiagnosisStatus::Success && it.report.layer == Layer::None
            })
    }
}
