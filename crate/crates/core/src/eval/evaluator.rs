use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::diagnose::{DiagnosisReport, Layer};
use super::log::SimulationLog;
use crate::llm::{AgentRole, Gateway, LlmError, Message};
use crate::prompts::PromptId;

pub const STDOUT_TAIL_CHARS: usize = 5000;
pub const STDERR_TAIL_CHARS: usize = 3000;

/// Last `n` characters of `s`, or all of it when shorter.
pub fn tail_chars(s: &str, n: usize) -> &str {
    let count = s.chars().count();
    if count <= n {
        return s;
    }
    let skip = count - n;
    let idx = s.char_indices().nth(skip).map(|(i, _)| i).unwrap_or(s.len());
    &s[idx..]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluatorVerdict {
    pub success: bool,
    pub reason: String,
    pub error: Option<String>,
}

impl EvaluatorVerdict {
    pub fn to_report(&self) -> DiagnosisReport {
        if self.success {
            return DiagnosisReport::success(self.reason.clone());
        }
        let reason = if self.reason.is_empty() { "evaluator reported failure".to_string() } else { self.reason.clone() };
        match &self.error {
            Some(e) => DiagnosisReport::fail(Layer::L1, reason, e.clone()),
            None => DiagnosisReport::fail(Layer::L2, reason, String::new()),
        }
    }
}

fn field(name: &str) -> Regex {
    Regex::new(&format!(r"(?m){name}:[ \t]*(.*?)[ \t]*(?:,[ \t]*(?:REASON|ERROR):|$)")).expect("static regex")
}

/// Accepts the three-line format and the single-line comma form.
pub fn parse_evaluator_reply(text: &str) -> Option<EvaluatorVerdict> {
    static RES: OnceLock<(Regex, Regex, Regex)> = OnceLock::new();
    let (success_re, reason_re, error_re) = RES.get_or_init(|| {
        (Regex::new(r"SUCCESS:[ \t]*\[?(Yes|No)\b").expect("static regex"), field("REASON"), field("ERROR"))
    });
    let success = success_re.captures(text)?.get(1)?.as_str() == "Yes";
    let grab = |re: &Regex| re.captures(text).and_then(|c| c.get(1)).map(|m| m.as_str().trim().to_string());
    let reason = grab(reason_re).unwrap_or_default();
    let error = grab(error_re).filter(|e| !e.is_empty() && !e.eq_ignore_ascii_case("none"));
    Some(EvaluatorVerdict { success, reason, error })
}

pub fn evaluator_bindings(log: &SimulationLog) -> BTreeMap<&'static str, String> {
    BTreeMap::from([
        ("returncode", log.return_code.to_string()),
        ("stdout", tail_chars(&log.stdout, STDOUT_TAIL_CHARS).to_string()),
        ("stderr", tail_chars(&log.stderr, STDERR_TAIL_CHARS).to_string()),
    ])
}

/// Advisory LLM reading of a log. `Ok(None)` when the reply is unparsable.
pub fn llm_evaluate(gateway: &Gateway, log: &SimulationLog) -> Result<Option<EvaluatorVerdict>, LlmError> {
    let system = PromptId::Evaluator
        .render(&evaluator_bindings(log))
        .map_err(|e| LlmError::InvalidRequest(e.to_string()))?;
    let req = gateway.request(
        AgentRole::Evaluator,
        system,
        vec![Message::user("Analyze the simulation output above.")],
    );
    let reply = gateway.complete(&req)?;
    let verdict = parse_evaluator_reply(&reply);
    if verdict.is_none() {
        tracing::warn!("unparsable evaluator output; rule-based verdict stands");
    }
    Ok(verdict)
}
