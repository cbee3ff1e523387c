//! Phase (a): the Planning Agent drafts a research plan with its retrieval
//! tools, the Reflection Agent judges it COMPLETE or INCOMPLETE, and a human
//! approves, revises or abandons it.

mod plan;
mod session;

use std::collections::BTreeMap;

use thiserror::Error;

pub use plan::{
    has_plan_marker, parse_plan, parse_verdict, rule_check_plan, serialize_plan, PlanError, PlanViolation,
    ReflectionVerdict, ResearchPlan, SetupKey, VerdictStatus, UNPARSABLE,
};
pub use session::{PlanningSession, PlanningState, SessionError, UserDecision, DEFAULT_MAX_REFLECTION_CYCLES};
#[cfg(test)]
pub(crate) use plan::tests::Q12_PLAN as TEST_PLAN;

use crate::llm::{run_tool_loop, AgentRole, Gateway, LlmError, Message, MessageRole, ToolSet};
use crate::prompts::PromptId;
use crate::task_spec::{to_planning_prompt_context, ContextError, ExperimentConfig, TaskQuery};

pub const DEFAULT_MAX_TOOL_STEPS: usize = 8;

#[derive(Debug, Error)]
pub enum PlanningError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

/// What one call to [`PlanningAgents::step`] did.
#[derive(Debug, Clone, PartialEq)]
pub enum PlanningStep {
    Drafted { plan: ResearchPlan, tool_calls: usize },
    DraftFailed { diagnostic: String },
    ClarificationRequested { question: String },
    Verdict { verdict: ReflectionVerdict, llm: bool },
    /// Nothing to do: the session waits for the user or is finished.
    Idle,
}

pub struct PlanningAgents<'a> {
    pub gateway: &'a Gateway,
    pub tools: &'a ToolSet,
    pub max_tool_steps: usize,
}

fn render_history(thread: &[Message]) -> String {
    thread
        .iter()
        .map(|m| {
            let who = match m.role {
                MessageRole::User => "user",
                MessageRole::Assistant => "assistant",
                MessageRole::Tool => "tool",
            };
            format!("[{who}] {}", m.content)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

impl PlanningAgents<'_> {
    /// Run the planner tool loop. On success the session moves to Reflecting;
    /// on an unparsable reply the session is left in its drafting state with
    /// a diagnostic and the parse error is returned.
    pub fn draft_plan(
        &self,
        q: &TaskQuery,
        c: &ExperimentConfig,
        session: &mut PlanningSession,
    ) -> Result<PlanningStep, PlanningError> {
        if !matches!(session.state, PlanningState::Drafting | PlanningState::Revising) {
            return Err(SessionError::WrongState {
                op: "draft_plan",
                expected: "Drafting or Revising",
                actual: session.state,
            }
            .into());
        }
        let system = to_planning_prompt_context(q, c)?;
        if session.thread.is_empty() {
            session.thread.push(Message::user(q.raw_query.clone()));
        }
        let request = self.gateway.request(AgentRole::Planner, system, session.thread.clone());
        let outcome = run_tool_loop(self.gateway, request, self.tools, self.max_tool_steps)?;
        session.thread = outcome.messages;
        let text = outcome.final_text;
        if !has_plan_marker(&text) && text.trim_end().ends_with('?') {
            let question = text.trim().to_string();
            session.accept_clarification(question.clone())?;
            return Ok(PlanningStep::ClarificationRequested { question });
        }
        match parse_plan(&text, session.next_version()) {
            Ok(plan) => {
                session.accept_draft(plan.clone())?;
                Ok(PlanningStep::Drafted { plan, tool_calls: outcome.calls.len() })
            }
            Err(e) => {
                session.diagnostic = Some(e.to_string());
                Err(e.into())
            }
        }
    }

    /// Judge the current draft. Rule-check failures and clarification requests
    /// are decided without calling the reflector.
    pub fn reflect(&self, q: &TaskQuery, session: &mut PlanningSession) -> Result<PlanningStep, PlanningError> {
        if session.state != PlanningState::Reflecting {
            return Err(SessionError::WrongState {
                op: "reflect",
                expected: "Reflecting",
                actual: session.state,
            }
            .into());
        }
        let version = session.plan.as_ref().map(|p| p.version).unwrap_or(0);
        let (verdict, llm) = if let Some(question) = &session.clarification {
            let v = ReflectionVerdict {
                status: VerdictStatus::Incomplete,
                justification: format!("agent requested more information: {question}"),
                plan_version: version,
            };
            (v, false)
        } else {
            let plan = session.plan.as_ref().expect("Reflecting with a plan or a clarification");
            let violations = rule_check_plan(plan);
            if !violations.is_empty() {
                let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
                let v = ReflectionVerdict {
                    status: VerdictStatus::Incomplete,
                    justification: format!("rule check: {}", list.join(", ")),
                    plan_version: version,
                };
                (v, false)
            } else {
                let vars = BTreeMap::from([
                    ("user_query", q.raw_query.clone()),
                    ("current_plan", plan.raw_text.clone()),
                    ("message", render_history(&session.thread)),
                ]);
                let system = PromptId::Reflector.render(&vars).map_err(ContextError::from)?;
                let request = self.gateway.request(
                    AgentRole::Reflector,
                    system,
                    vec![Message::user("Assess the GENERATED_PLAN.")],
                );
                (parse_verdict(&self.gateway.complete(&request)?, version), true)
            }
        };
        session.accept_verdict(verdict.clone())?;
        if session.state == PlanningState::Drafting {
            session.thread.push(Message::user(format!(
                "Reflection feedback: INCOMPLETE: {}\nRevise the plan and output it in the PLAN format.",
                verdict.justification
            )));
        }
        Ok(PlanningStep::Verdict { verdict, llm })
    }

    /// Advance the session by one agent action.
    pub fn step(
        &self,
        q: &TaskQuery,
        c: &ExperimentConfig,
        session: &mut PlanningSession,
    ) -> Result<PlanningStep, PlanningError> {
        match session.state {
            PlanningState::Drafting | PlanningState::Revising => match self.draft_plan(q, c, session) {
                Err(PlanningError::Plan(e)) => {
                    let diagnostic = e.to_string();
                    session.record_draft_failure(diagnostic.clone())?;
                    if session.state == PlanningState::Drafting {
                        session.thread.push(Message::user(format!(
                            "Your reply could not be used ({diagnostic}). Output the plan in the PLAN format."
                        )));
                    }
                    Ok(PlanningStep::DraftFailed { diagnostic })
                }
                other => other,
            },
            PlanningState::Reflecting => self.reflect(q, session),
            _ => Ok(PlanningStep::Idle),
        }
    }

    /// Step until the session needs the user or is finished.
    pub fn run_until_user(
        &self,
        q: &TaskQuery,
        c: &ExperimentConfig,
        session: &mut PlanningSession,
        mut on_step: impl FnMut(&PlanningStep, &PlanningSession),
    ) -> Result<(), PlanningError> {
        loop {
            let step = self.step(q, c, session)?;
            if step == PlanningStep::Idle {
                return Ok(());
            }
            on_step(&step, session);
        }
    }
}
