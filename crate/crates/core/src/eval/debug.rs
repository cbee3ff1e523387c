use std::collections::BTreeMap;

use thiserror::Error;

use super::diagnose::DiagnosisReport;
use crate::codebase::{CodebaseError, CodebaseVersion, ModuleKind, PatchSet};
use crate::fence::{parse_file_blocks, FenceError};
use crate::llm::{AgentRole, Gateway, LlmError, Message};
use crate::prompts::PromptId;

#[derive(Debug, Error)]
pub enum DebugError {
    #[error("debug_patch requires a FAIL report")]
    NotFailing,
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("patch protocol: {0}")]
    Protocol(#[from] FenceError),
    #[error("patch rejected: {0}")]
    Rejected(#[from] CodebaseError),
}

impl DebugError {
    /// Malformed replies are counted as spent attempts instead of aborting the loop.
    pub fn is_reply_fault(&self) -> bool {
        matches!(self, DebugError::Protocol(_) | DebugError::Rejected(_))
    }
}

pub fn debugger_bindings(c: &CodebaseVersion, report: &DiagnosisReport) -> BTreeMap<&'static str, String> {
    BTreeMap::from([
        ("error_feedback", report.feedback()),
        ("code_run", c.file(ModuleKind::Runner).to_string()),
        ("code_task", c.file(ModuleKind::Task).to_string()),
        ("code_client_app", c.file(ModuleKind::Client).to_string()),
        ("code_server_app", c.file(ModuleKind::Server).to_string()),
        ("code_strategy", c.file(ModuleKind::Strategy).to_string()),
    ])
}

/// f_debug: ask the debugger for whole-file replacements of the faulty files.
pub fn debug_patch(gateway: &Gateway, c: &CodebaseVersion, report: &DiagnosisReport) -> Result<PatchSet, DebugError> {
    if report.is_success() {
        return Err(DebugError::NotFailing);
    }
    let system = PromptId::Debugger
        .render(&debugger_bindings(c, report))
        .map_err(|e| LlmError::InvalidRequest(e.to_string()))?;
    let req = gateway.request(
        AgentRole::Debugger,
        system,
        vec![Message::user("Fix the failing simulation. Output only the files that need changes.")],
    );
    let reply = gateway.complete(&req)?;
    let patch = parse_file_blocks(&reply)?;
    patch.check()?;
    Ok(patch)
}
