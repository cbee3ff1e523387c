//! The planning state machine, free of any LLM calls.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::plan::{ReflectionVerdict, ResearchPlan, VerdictStatus};
use crate::llm::Message;

pub const DEFAULT_MAX_REFLECTION_CYCLES: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PlanningState {
    Drafting,
    Reflecting,
    AwaitingUser,
    Revising,
    Approved,
    Abandoned,
}

impl PlanningState {
    /// Edges of the state machine.
    pub fn can_move_to(self, next: PlanningState) -> bool {
        use PlanningState::*;
        matches!(
            (self, next),
            (Drafting, Reflecting)
                | (Reflecting, Drafting)
                | (Reflecting, AwaitingUser)
                | (AwaitingUser, Approved)
                | (AwaitingUser, Revising)
                | (AwaitingUser, Abandoned)
                | (Revising, Reflecting)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "lowercase")]
pub enum UserDecision {
    Approve {
        #[serde(default)]
        note: Option<String>,
    },
    Revise {
        feedback: String,
    },
    Abandon,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("wrong state: {op} needs {expected}, session is {actual:?}")]
    WrongState {
        op: &'static str,
        expected: &'static str,
        actual: PlanningState,
    },
    #[error("cannot approve: no plan has been drafted")]
    NoPlan,
    #[error("revise needs non-empty feedback")]
    EmptyFeedback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanningSession {
    pub state: PlanningState,
    pub plan: Option<ResearchPlan>,
    pub verdicts: Vec<ReflectionVerdict>,
    /// INCOMPLETE verdicts since the last user decision.
    pub reflection_cycles: u32,
    pub max_reflection_cycles: u32,
    pub user_feedback: Vec<String>,
    /// Set when the user approves a plan that never got a COMPLETE verdict.
    pub approval_override: bool,
    pub approval_note: Option<String>,
    /// Question the planner asked instead of drafting, if any.
    pub clarification: Option<String>,
    /// Latest draft failure, kept for display.
    pub diagnostic: Option<String>,
    /// Every state the session has been in, in order.
    pub history: Vec<PlanningState>,
    /// The planner's conversation so far.
    #[serde(default)]
    pub thread: Vec<Message>,
}

impl PlanningSession {
    pub fn new(max_reflection_cycles: u32) -> Self {
        Self {
            state: PlanningState::Drafting,
            plan: None,
            verdicts: Vec::new(),
            reflection_cycles: 0,
            max_reflection_cycles: max_reflection_cycles.max(1),
            user_feedback: Vec::new(),
            approval_override: false,
            approval_note: None,
            clarification: None,
            diagnostic: None,
            history: vec![PlanningState::Drafting],
            thread: Vec::new(),
        }
    }

    fn go(&mut self, next: PlanningState) {
        debug_assert!(self.state.can_move_to(next), "{:?} -> {next:?}", self.state);
        self.state = next;
        self.history.push(next);
    }

    fn expect(&self, op: &'static str, expected: &'static str, ok: bool) -> Result<(), SessionError> {
        if ok {
            Ok(())
        } else {
            Err(SessionError::WrongState { op, expected, actual: self.state })
        }
    }

    fn expect_drafting(&self, op: &'static str) -> Result<(), SessionError> {
        self.expect(
            op,
            "Drafting or Revising",
            matches!(self.state, PlanningState::Drafting | PlanningState::Revising),
        )
    }

    pub fn next_version(&self) -> u32 {
        self.plan.as_ref().map(|p| p.version + 1).unwrap_or(1)
    }

    /// A parsed draft arrived.
    pub fn accept_draft(&mut self, plan: ResearchPlan) -> Result<(), SessionError> {
        self.expect_drafting("accept_draft")?;
        self.plan = Some(plan);
        self.clarification = None;
        self.diagnostic = None;
        self.go(PlanningState::Reflecting);
        Ok(())
    }

    /// The planner asked a question instead of drafting.
    pub fn accept_clarification(&mut self, question: String) -> Result<(), SessionError> {
        self.expect_drafting("accept_clarification")?;
        self.clarification = Some(question);
        self.go(PlanningState::Reflecting);
        Ok(())
    }

    /// The draft could not be parsed. It is judged INCOMPLETE like a weak plan,
    /// so repeated failures reach the user instead of looping.
    pub fn record_draft_failure(&mut self, diagnostic: String) -> Result<(), SessionError> {
        self.expect_drafting("record_draft_failure")?;
        self.diagnostic = Some(diagnostic.clone());
        self.go(PlanningState::Reflecting);
        let version = self.plan.as_ref().map(|p| p.version).unwrap_or(0);
        self.accept_verdict(ReflectionVerdict {
            status: VerdictStatus::Incomplete,
            justification: format!("draft failed: {diagnostic}"),
            plan_version: version,
        })
    }

    pub fn accept_verdict(&mut self, verdict: ReflectionVerdict) -> Result<(), SessionError> {
        self.expect("accept_verdict", "Reflecting", self.state == PlanningState::Reflecting)?;
        let status = verdict.status;
        self.verdicts.push(verdict);
        if self.clarification.is_some() {
            self.go(PlanningState::AwaitingUser);
            return Ok(());
        }
        match status {
            VerdictStatus::Complete => self.go(PlanningState::AwaitingUser),
            VerdictStatus::Incomplete => {
                self.reflection_cycles += 1;
                if self.reflection_cycles >= self.max_reflection_cycles {
                    self.go(PlanningState::AwaitingUser);
                } else {
                    self.go(PlanningState::Drafting);
                }
            }
        }
        Ok(())
    }

    /// Whether the current plan version has a COMPLETE verdict.
    pub fn current_plan_complete(&self) -> bool {
        let Some(plan) = &self.plan else { return false };
        self.verdicts
            .iter()
            .any(|v| v.plan_version == plan.version && v.status == VerdictStatus::Complete)
    }

    pub fn submit_user_decision(&mut self, decision: UserDecision) -> Result<(), SessionError> {
        self.expect("submit_user_decision", "AwaitingUser", self.state == PlanningState::AwaitingUser)?;
        match decision {
            UserDecision::Approve { note } => {
                if self.plan.is_none() {
                    return Err(SessionError::NoPlan);
                }
                self.approval_override = !self.current_plan_complete();
                self.approval_note = note;
                self.go(PlanningState::Approved);
            }
            UserDecision::Revise { feedback } => {
                if feedback.trim().is_empty() {
                    return Err(SessionError::EmptyFeedback);
                }
                self.thread.push(Message::user(feedback.clone()));
                self.user_feedback.push(feedback);
                self.reflection_cycles = 0;
                self.clarification = None;
                self.go(PlanningState::Revising);
            }
            UserDecision::Abandon => self.go(PlanningState::Abandoned),
        }
        Ok(())
    }
}
