//! Phase (b): the Supervisor turns an approved plan into a per-module
//! blueprint, coder/tester pairs build the modules wave by wave, and the
//! stable sources are integrated into C_0.

mod blueprint;
mod schedule;
mod symbols;
mod syntax;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use blueprint::{Blueprint, BlueprintError, ModulePlan};
pub use schedule::{dependencies, dependency_graph, is_topological, layer, schedule, ScheduleMode};
pub use symbols::{ModuleSymbols, RequiredSymbols};
pub use syntax::{default_checker, GrammarChecker, PythonChecker, SyntaxChecker, SyntaxDiagnostic};

use crate::codebase::{CodebaseError, CodebaseVersion, ModuleKind, Provenance};
use crate::fence::extract_code_block;
use crate::llm::{run_tool_loop, AgentRole, Gateway, LlmError, Message, ToolSet};
use crate::planning::ResearchPlan;
use crate::prompts::{PromptId, DOCS_TOOL, SEARCH_TOOL};
use crate::template::TemplateError;

pub const DEFAULT_MAX_MODULE_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BuildStatus {
    Blocked,
    InProgress,
    Testing,
    Stable,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleBuildState {
    pub kind: ModuleKind,
    pub status: BuildStatus,
    pub attempts: u32,
    pub test_feedback: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoderMode {
    Implementation,
    Debugging,
}

impl CoderMode {
    pub fn for_attempt(attempt: u32) -> Self {
        if attempt <= 1 {
            CoderMode::Implementation
        } else {
            CoderMode::Debugging
        }
    }

    /// The condition header the coder prompts switch on.
    pub fn condition(self) -> &'static str {
        match self {
            CoderMode::Implementation => "Condition 2: Implementation Mode",
            CoderMode::Debugging => "Condition 1: Debugging Mode",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub kind: ModuleKind,
    pub attempt: u32,
    pub mode: CoderMode,
    pub passed: bool,
    pub feedback: String,
}

#[derive(Debug, Error)]
pub enum CodegenError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Blueprint(#[from] BlueprintError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Codebase(#[from] CodebaseError),
}

#[derive(Debug, Clone)]
pub struct CodegenConfig {
    pub max_module_attempts: u32,
    pub schedule_mode: ScheduleMode,
    /// Ask the tester agent to review sources that pass the deterministic checks.
    pub llm_review: bool,
    pub max_tool_steps: usize,
}

impl Default for CodegenConfig {
    fn default() -> Self {
        Self {
            max_module_attempts: DEFAULT_MAX_MODULE_ATTEMPTS,
            schedule_mode: ScheduleMode::Dependencies,
            llm_review: false,
            max_tool_steps: 8,
        }
    }
}

/// Result of building one module.
#[derive(Debug, Clone)]
pub struct ModuleOutcome {
    pub state: ModuleBuildState,
    pub source: Option<String>,
    pub attempts: Vec<AttemptRecord>,
}

#[derive(Debug, Clone)]
pub enum CodegenOutcome {
    Integrated { codebase: CodebaseVersion, modules: Vec<ModuleOutcome> },
    Failed { kind: ModuleKind, modules: Vec<ModuleOutcome> },
}

pub struct Codegen<'a> {
    pub gateway: &'a Gateway,
    pub tools: &'a ToolSet,
    pub checker: &'a dyn SyntaxChecker,
    pub symbols: &'a RequiredSymbols,
    pub config: CodegenConfig,
}

fn prompt_for(kind: ModuleKind) -> PromptId {
    match kind {
        ModuleKind::Task => PromptId::CoderTask,
        ModuleKind::Client => PromptId::CoderClient,
        ModuleKind::Strategy => PromptId::CoderStrategy,
        ModuleKind::Server => PromptId::CoderServer,
        ModuleKind::Runner => PromptId::CoderRunner,
    }
}

pub fn coder_role(kind: ModuleKind) -> AgentRole {
    match kind {
        ModuleKind::Runner => AgentRole::Orchestrator,
        k => AgentRole::Coder(k),
    }
}

fn fenced_file(name: &str, src: &str) -> String {
    format!("### {name}\n{}", crate::fence::fence(src, "python"))
}

fn or_none(s: &str) -> String {
    if s.trim().is_empty() {
        "None".to_string()
    } else {
        s.to_string()
    }
}

/// Deterministic tester checks: syntax, then required names.
pub fn tester_verify(
    kind: ModuleKind,
    source: &str,
    checker: &dyn SyntaxChecker,
    symbols: &RequiredSymbols,
) -> (bool, String) {
    let mut problems = Vec::new();
    if let Err(d) = checker.check(source) {
        problems.push(d.to_string());
    }
    let missing = symbols.missing(kind, source);
    if !missing.is_empty() {
        problems.push(format!("missing required symbols in {}: {}", kind.file_name(), missing.join(", ")));
    }
    if problems.is_empty() {
        (true, String::new())
    } else {
        (false, problems.join("\n"))
    }
}

impl Codegen<'_> {
    /// Run the supervisor and parse its implementation plan.
    pub fn decompose(&self, plan: &ResearchPlan) -> Result<Blueprint, CodegenError> {
        let vars = BTreeMap::from([
            ("research_plan", plan.raw_text.clone()),
            ("docs_tool", DOCS_TOOL.to_string()),
            ("search_tool", SEARCH_TOOL.to_string()),
        ]);
        let system = PromptId::Supervisor.render(&vars)?;
        let request = self.gateway.request(
            AgentRole::Supervisor,
            system,
            vec![Message::user("Produce the implementation plan for the research plan above.")],
        );
        let out = run_tool_loop(self.gateway, request, self.tools, self.config.max_tool_steps)?;
        Ok(Blueprint::parse(&out.final_text)?)
    }

    fn coder_request(
        &self,
        kind: ModuleKind,
        blueprint: &Blueprint,
        built: &BTreeMap<ModuleKind, String>,
        previous: Option<&str>,
        feedback: &str,
        attempt: u32,
    ) -> Result<crate::llm::ChatRequest, CodegenError> {
        let mode = CoderMode::for_attempt(attempt);
        let task = blueprint.task_description(kind);
        let vars: BTreeMap<&str, String> = if kind == ModuleKind::Runner {
            let code = |k: ModuleKind| or_none(built.get(&k).map(String::as_str).unwrap_or(""));
            BTreeMap::from([
                ("codebase_task", code(ModuleKind::Task)),
                ("codebase_client", code(ModuleKind::Client)),
                ("codebase_server", code(ModuleKind::Server)),
                ("codebase_strategy", code(ModuleKind::Strategy)),
                ("codebase_run", or_none(previous.unwrap_or(""))),
                ("implementation_overview", blueprint.raw_text.clone()),
                ("test_feedback", or_none(feedback)),
            ])
        } else {
            let mut codebase = String::new();
            for (k, src) in built {
                codebase.push_str(&fenced_file(&k.file_name(), src));
            }
            if let Some(prev) = previous {
                codebase.push_str(&fenced_file(&kind.file_name(), prev));
            }
            BTreeMap::from([
                ("task", task.clone()),
                ("codebase", or_none(&codebase)),
                ("test_feedback", or_none(feedback)),
            ])
        };
        let system = prompt_for(kind).render(&vars)?;
        let user = match mode {
            CoderMode::Implementation => format!(
                "{}\nImplement {} ({}).\nTask Description: {task}",
                mode.condition(),
                kind.file_name(),
                kind.label()
            ),
            CoderMode::Debugging => format!(
                "{}\nFix {} ({}).\nTest Feedback: {feedback}",
                mode.condition(),
                kind.file_name(),
                kind.label()
            ),
        };
        Ok(self.gateway.request(coder_role(kind), system, vec![Message::user(user)]))
    }

    fn llm_review(&self, kind: ModuleKind, blueprint: &Blueprint, source: &str) -> Result<Option<String>, CodegenError> {
        let vars = BTreeMap::from([
            ("module", kind.label().to_string()),
            ("task", blueprint.task_description(kind)),
            ("codebase", fenced_file(&kind.file_name(), source)),
        ]);
        let system = PromptId::Tester.render(&vars)?;
        let request = self.gateway.request(
            AgentRole::Tester(kind),
            system,
            vec![Message::user(format!("Review {}.", kind.file_name()))],
        );
        let reply = self.gateway.complete(&request)?;
        let t = reply.trim_start();
        if let Some(rest) = t.strip_prefix("FAIL:") {
            return Ok(Some(format!("tester review: {}", rest.trim())));
        }
        if !t.starts_with("PASS:") {
            tracing::warn!(module = %kind, "tester review unparsable; deterministic verdict kept");
        }
        Ok(None)
    }

    /// Coder/tester loop for one module; dependencies must already be built.
    pub fn build_module(
        &self,
        kind: ModuleKind,
        blueprint: &Blueprint,
        built: &BTreeMap<ModuleKind, String>,
    ) -> Result<ModuleOutcome, CodegenError> {
        let mut state = ModuleBuildState {
            kind,
            status: BuildStatus::InProgress,
            attempts: 0,
            test_feedback: String::new(),
        };
        let mut records = Vec::new();
        let mut previous: Option<String> = None;
        let max = self.config.max_module_attempts.max(1);
        for attempt in 1..=max {
            state.attempts = attempt;
            state.status = BuildStatus::InProgress;
            let request = self.coder_request(kind, blueprint, built, previous.as_deref(), &state.test_feedback, attempt)?;
            let reply = self.gateway.complete(&request)?;
            state.status = BuildStatus::Testing;
            let (passed, feedback, source) = match extract_code_block(&reply) {
                Err(e) => (false, format!("{e}: reply must contain the complete code in a ```python``` block"), None),
                Ok((src, _)) => {
                    let (mut ok, mut fb) = tester_verify(kind, &src, self.checker, self.symbols);
                    if ok && self.config.llm_review {
                        if let Some(review) = self.llm_review(kind, blueprint, &src)? {
                            ok = false;
                            fb = review;
                        }
                    }
                    (ok, fb, Some(src))
                }
            };
            records.push(AttemptRecord {
                kind,
                attempt,
                mode: CoderMode::for_attempt(attempt),
                passed,
                feedback: feedback.clone(),
            });
            if passed {
                state.status = BuildStatus::Stable;
                state.test_feedback.clear();
                return Ok(ModuleOutcome { state, source, attempts: records });
            }
            state.test_feedback = feedback;
            if source.is_some() {
                previous = source;
            }
        }
        state.status = BuildStatus::Failed;
        Ok(ModuleOutcome { state, source: None, attempts: records })
    }

    /// Build one wave; its modules run concurrently against the same
    /// snapshot of already-built sources. Outcomes keep the wave's order.
    pub fn build_wave(
        &self,
        wave: &[ModuleKind],
        blueprint: &Blueprint,
        built: &BTreeMap<ModuleKind, String>,
    ) -> Result<Vec<ModuleOutcome>, CodegenError> {
        if wave.len() == 1 {
            return Ok(vec![self.build_module(wave[0], blueprint, built)?]);
        }
        let results: Vec<Result<ModuleOutcome, CodegenError>> = std::thread::scope(|s| {
            let handles: Vec<_> = wave
                .iter()
                .map(|&k| s.spawn(move || self.build_module(k, blueprint, built)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("module build thread panicked")).collect()
        });
        results.into_iter().collect()
    }

    /// Build every module in schedule order and integrate C_0.
    pub fn build_all(
        &self,
        blueprint: &Blueprint,
        mut on_module: impl FnMut(&ModuleOutcome),
    ) -> Result<CodegenOutcome, CodegenError> {
        let mut built: BTreeMap<ModuleKind, String> = BTreeMap::new();
        let mut provenance: BTreeMap<ModuleKind, Provenance> = BTreeMap::new();
        let mut modules = Vec::new();
        for wave in schedule(self.config.schedule_mode) {
            let mut failed = None;
            for outcome in self.build_wave(&wave, blueprint, &built)? {
                on_module(&outcome);
                let kind = outcome.state.kind;
                match &outcome.source {
                    Some(src) if outcome.state.status == BuildStatus::Stable => {
                        built.insert(kind, src.clone());
                        provenance.insert(kind, outcome.provenance());
                    }
                    _ => failed = failed.or(Some(kind)),
                }
                modules.push(outcome);
            }
            if let Some(kind) = failed {
                return Ok(CodegenOutcome::Failed { kind, modules });
            }
        }
        let sources = built
            .into_iter()
            .map(|(k, src)| (k, (src, provenance.remove(&k).expect("provenance per module"))))
            .collect();
        let codebase = CodebaseVersion::integrate(&sources)?;
        Ok(CodegenOutcome::Integrated { codebase, modules })
    }
}

impl ModuleOutcome {
    pub fn is_stable(&self) -> bool {
        self.state.status == BuildStatus::Stable && self.source.is_some()
    }

    pub fn provenance(&self) -> Provenance {
        Provenance { agent_role: coder_role(self.state.kind).key(), attempt: self.state.attempts }
    }
}
