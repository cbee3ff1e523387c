//! The Thought / Action / Action Input / Observation protocol.

use std::collections::BTreeMap;
use std::sync::Arc;

use regex::Regex;
use serde_json::Value;

use super::{ChatRequest, Gateway, LlmError, Message, MessageRole};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolCall {
    pub thought: String,
    pub action: String,
    pub action_input: BTreeMap<String, String>,
    pub observation: String,
}

pub trait ToolExecutor: Send + Sync {
    fn call(&self, input: &BTreeMap<String, String>) -> String;
}

impl<F> ToolExecutor for F
where
    F: Fn(&BTreeMap<String, String>) -> String + Send + Sync,
{
    fn call(&self, input: &BTreeMap<String, String>) -> String {
        self(input)
    }
}

pub type ToolSet = BTreeMap<String, Arc<dyn ToolExecutor>>;

fn line_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^[ \t]*(?:[-*][ \t]*)?(Thought|Action Input|Action|Observation):").unwrap())
}

fn clean_action(name: &str) -> String {
    name.trim()
        .trim_matches(|c: char| c == '[' || c == ']' || c == '`' || c == '*' || c == '"')
        .trim()
        .to_string()
}

/// The first Thought/Action/Action Input triple in `text`, if any Action line exists.
pub fn parse_tool_call(text: &str) -> Result<Option<ToolCall>, LlmError> {
    let marks: Vec<(usize, usize, &str)> = line_re()
        .captures_iter(text)
        .map(|c| {
            let whole = c.get(0).unwrap();
            (whole.start(), whole.end(), c.get(1).unwrap().as_str())
        })
        .collect();
    let Some(ai) = marks.iter().position(|m| m.2 == "Action") else {
        return Ok(None);
    };
    let section = |i: usize| {
        let end = marks.get(i + 1).map(|m| m.0).unwrap_or(text.len());
        text[marks[i].1..end].trim()
    };
    let thought = marks[..ai]
        .iter()
        .rposition(|m| m.2 == "Thought")
        .map(|i| section(i).to_string())
        .unwrap_or_default();
    let action = clean_action(section(ai).lines().next().unwrap_or(""));
    if action.is_empty() {
        return Err(LlmError::MalformedActionInput("empty action name".into()));
    }
    let input_mark = marks.get(ai + 1).filter(|m| m.2 == "Action Input").ok_or_else(|| {
        LlmError::MalformedActionInput(format!("no Action Input for {action}"))
    })?;
    let raw = text[input_mark.1..].trim_start();
    let mut stream = serde_json::Deserializer::from_str(raw).into_iter::<Value>();
    let value = match stream.next() {
        Some(Ok(v)) => v,
        _ => {
            let shown: String = raw.lines().next().unwrap_or("").chars().take(80).collect();
            return Err(LlmError::MalformedActionInput(shown));
        }
    };
    let Value::Object(map) = value else {
        return Err(LlmError::MalformedActionInput("action input is not an object".into()));
    };
    let mut action_input = BTreeMap::new();
    for (k, v) in map {
        let s = match v {
            Value::String(s) => s,
            Value::Number(n) => n.to_string(),
            Value::Bool(b) => b.to_string(),
            other => {
                return Err(LlmError::MalformedActionInput(format!("value for {k} is not flat: {other}")));
            }
        };
        action_input.insert(k, s);
    }
    Ok(Some(ToolCall { thought, action, action_input, observation: String::new() }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolLoopOutcome {
    pub final_text: String,
    pub calls: Vec<ToolCall>,
    /// The full message thread, ending with the final assistant reply.
    pub messages: Vec<Message>,
}

/// Alternate completion and tool execution until a reply carries no tool call.
pub fn run_tool_loop(
    gateway: &Gateway,
    request: ChatRequest,
    tools: &ToolSet,
    max_steps: usize,
) -> Result<ToolLoopOutcome, LlmError> {
    let mut request = request;
    let mut calls = Vec::new();
    for _ in 0..max_steps {
        let text = gateway.complete(&request)?;
        let Some(mut call) = parse_tool_call(&text)? else {
            request.messages.push(Message::assistant(text.clone()));
            return Ok(ToolLoopOutcome { final_text: text, calls, messages: request.messages });
        };
        let tool = tools.get(&call.action).ok_or_else(|| LlmError::UnknownTool(call.action.clone()))?;
        call.observation = tool.call(&call.action_input);
        request.messages.push(Message::assistant(text));
        request.messages.push(Message { role: MessageRole::Tool, content: format!("Observation: {}", call.observation) });
        calls.push(call);
    }
    Err(LlmError::MaxStepsExceeded(max_steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{AgentRole, ScriptedBackend};

    const CALL: &str = "Thought: Yes, I need prior work on stragglers.\nAction: web_search\nAction Input: {\"query\": \"FedProx stragglers\", \"context\": \"plan\"}";

    #[test]
    fn parses_the_triple() {
        let c = parse_tool_call(CALL).unwrap().unwrap();
        assert_eq!(c.action, "web_search");
        assert_eq!(c.action_input["query"], "FedProx stragglers");
        assert_eq!(c.action_input["context"], "plan");
        assert_eq!(c.thought, "Yes, I need prior work on stragglers.");
    }

    #[test]
    fn bulleted_and_bracketed_forms() {
        let t = "- Thought: Yes\n- Action: [search_docs]\n- Action Input: {\"query\": \"q\"}\n- Observation: [tool response will appear here]";
        let c = parse_tool_call(t).unwrap().unwrap();
        assert_eq!(c.action, "search_docs");
        assert_eq!(c.action_input.len(), 1);
    }

    #[test]
    fn plan_text_has_no_call() {
        assert_eq!(parse_tool_call("PLAN:\n1. Summary: do FL").unwrap(), None);
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(
            parse_tool_call("Action: search_docs\nAction Input: not-json"),
            Err(LlmError::MalformedActionInput(_))
        ));
        assert!(matches!(
            parse_tool_call("Action: search_docs\nAction Input: [\"a\"]"),
            Err(LlmError::MalformedActionInput(_))
        ));
        assert!(matches!(
            parse_tool_call("Action: search_docs\nAction Input: {\"query\": {\"x\": 1}}"),
            Err(LlmError::MalformedActionInput(_))
        ));
        assert!(matches!(parse_tool_call("Action: search_docs"), Err(LlmError::MalformedActionInput(_))));
    }

    fn tools() -> ToolSet {
        let mut t: ToolSet = BTreeMap::new();
        t.insert("search_docs".into(), Arc::new(|_: &BTreeMap<String, String>| "doc-hit".to_string()));
        t
    }

    fn gateway(replies: Vec<&str>) -> Gateway {
        let b = ScriptedBackend::from_replies(replies.into_iter().map(|r| (AgentRole::Planner, r)));
        Gateway::new(Arc::new(b))
    }

    #[test]
    fn one_call_then_plan() {
        let call = "Thought: Yes\nAction: search_docs\nAction Input: {\"query\": \"fedavg\"}";
        let g = gateway(vec![call, "PLAN: done"]);
        let req = g.request(AgentRole::Planner, "sys".into(), vec![Message::user("q")]);
        let out = run_tool_loop(&g, req, &tools(), 4).unwrap();
        assert_eq!(out.final_text, "PLAN: done");
        assert_eq!(out.calls.len(), 1);
        assert_eq!(out.calls[0].observation, "doc-hit");
        let roles: Vec<_> = out.messages.iter().map(|m| m.role).collect();
        assert_eq!(roles, vec![MessageRole::User, MessageRole::Assistant, MessageRole::Tool, MessageRole::Assistant]);
    }

    #[test]
    fn immediate_answer() {
        let g = gateway(vec!["PLAN: now"]);
        let req = g.request(AgentRole::Planner, "sys".into(), vec![Message::user("q")]);
        assert!(run_tool_loop(&g, req, &tools(), 3).unwrap().calls.is_empty());
    }

    #[test]
    fn step_budget_and_unknown_tool() {
        let call = "Action: search_docs\nAction Input: {\"query\": \"x\"}";
        let g = gateway(vec![call; 5]);
        let req = g.request(AgentRole::Planner, "sys".into(), vec![Message::user("q")]);
        assert_eq!(run_tool_loop(&g, req, &tools(), 3), Err(LlmError::MaxStepsExceeded(3)));
        let g = gateway(vec!["Action: rm_rf\nAction Input: {}"]);
        let req = g.request(AgentRole::Planner, "sys".into(), vec![Message::user("q")]);
        assert_eq!(run_tool_loop(&g, req, &tools(), 3), Err(LlmError::UnknownTool("rm_rf".into())));
    }
}
