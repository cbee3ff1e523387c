//! Chat-completion boundary shared by every agent.
//!
//! A [`Gateway`] wraps one [`Backend`] (scripted or remote HTTP), validates
//! requests, applies per-role sampling settings and appends one JSON line per
//! call to the call log.

mod remote;
mod scripted;
mod tools;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{SharedClock, SystemClock};
use crate::codebase::ModuleKind;

pub use remote::{RemoteBackend, SlidingWindowLimiter};
pub use scripted::ScriptedBackend;
pub use tools::{parse_tool_call, run_tool_loop, ToolCall, ToolExecutor, ToolLoopOutcome, ToolSet};

pub const ENDPOINT_ENV: &str = "FEDFORGE_LLM_ENDPOINT";
pub const KEY_ENV: &str = "FEDFORGE_LLM_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AgentRole {
    Planner,
    Reflector,
    Supervisor,
    Coder(ModuleKind),
    Tester(ModuleKind),
    /// Writes the runner module.
    Orchestrator,
    Evaluator,
    Debugger,
}

impl AgentRole {
    /// Stable key used by the scripted backend and the call log.
    pub fn key(self) -> String {
        match self {
            AgentRole::Planner => "planner".into(),
            AgentRole::Reflector => "reflector".into(),
            AgentRole::Supervisor => "supervisor".into(),
            AgentRole::Coder(k) => format!("coder_{}", k.label().to_ascii_lowercase()),
            AgentRole::Tester(k) => format!("tester_{}", k.label().to_ascii_lowercase()),
            AgentRole::Orchestrator => "orchestrator".into(),
            AgentRole::Evaluator => "evaluator".into(),
            AgentRole::Debugger => "debugger".into(),
        }
    }

    pub fn from_key(key: &str) -> Option<AgentRole> {
        let fixed = match key {
            "planner" => Some(AgentRole::Planner),
            "reflector" => Some(AgentRole::Reflector),
            "supervisor" => Some(AgentRole::Supervisor),
            "orchestrator" => Some(AgentRole::Orchestrator),
            "evaluator" => Some(AgentRole::Evaluator),
            "debugger" => Some(AgentRole::Debugger),
            _ => None,
        };
        fixed.or_else(|| {
            let (prefix, kind) = key.split_once('_')?;
            let kind = ModuleKind::parse_label(kind)?;
            match prefix {
                "coder" => Some(AgentRole::Coder(kind)),
                "tester" => Some(AgentRole::Tester(kind)),
                _ => None,
            }
        })
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageRole {
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: MessageRole,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: MessageRole::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: MessageRole::Assistant, content: content.into() }
    }
    pub fn tool(content: impl Into<String>) -> Self {
        Self { role: MessageRole::Tool, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub agent_role: AgentRole,
    pub system_prompt: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    pub fn check(&self) -> Result<(), LlmError> {
        match self.messages.first() {
            None => return Err(LlmError::InvalidRequest("messages must not be empty".into())),
            Some(m) if m.role == MessageRole::Assistant => {
                return Err(LlmError::InvalidRequest("first message must be user or tool".into()))
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!("temperature {} outside [0,1]", self.temperature)));
        }
        if self.max_output_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn estimated_input_tokens(&self) -> u64 {
        estimate_tokens(&self.system_prompt)
            + self.messages.iter().map(|m| estimate_tokens(&m.content)).sum::<u64>()
    }
}

/// Rough token count: four characters per token, rounded up.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    Scripted,
    RemoteHTTP,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    /// Ignored by scripted backends.
    pub endpoint: Option<String>,
    pub model_name: String,
    pub per_minute_request_cap: u32,
    pub max_retries: u32,
}

impl BackendDescriptor {
    pub fn scripted() -> Self {
        Self {
            kind: BackendKind::Scripted,
            endpoint: None,
            model_name: "scripted".into(),
            per_minute_request_cap: u32::MAX,
            max_retries: 0,
        }
    }

    pub fn remote(endpoint: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::RemoteHTTP,
            endpoint: Some(endpoint.into()),
            model_name: model_name.into(),
            per_minute_request_cap: 60,
            max_retries: 3,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("request needs ~{needed} input tokens, budget is {budget}")]
    BudgetExceeded { needed: u64, budget: u64 },
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("script exhausted for {role} at reply {ordinal}")]
    ScriptExhausted { role: String, ordinal: u32 },
    #[error("bad script: {0}")]
    BadScript(String),
    #[error("malformed action input: {0}")]
    MalformedActionInput(String),
    #[error("unknown tool {0}")]
    UnknownTool(String),
    #[error("tool loop exceeded {0} steps")]
    MaxStepsExceeded(usize),
}

/// What a backend returns for one request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub retries: u32,
    pub tokens_in: Option<u64>,
    pub tokens_out: Option<u64>,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Self { text: text.into(), retries: 0, tokens_in: None, tokens_out: None }
    }
}

pub trait Backend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;
    fn complete(&self, request: &ChatRequest) -> Result<Completion, LlmError>;

    /// Roles that have scripted replies, for backends that are scripted.
    fn scripted_roles(&self) -> Option<BTreeSet<String>> {
        None
    }

    /// Skip replies already consumed by an earlier process.
    fn fast_forward(&self, _consumed: &BTreeMap<String, u32>) {}

    /// Replies consumed so far per role; empty for unscripted backends.
    fn cursors(&self) -> BTreeMap<String, u32> {
        BTreeMap::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub ts: String,
    pub agent_role: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub latency_ms: u64,
    pub retries: u32,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewaySettings {
    pub default_temperature: f64,
    pub temperatures: BTreeMap<String, f64>,
    pub max_output_tokens: u32,
    pub max_input_tokens: u64,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        Self {
            default_temperature: 0.2,
            temperatures: BTreeMap::new(),
            max_output_tokens: 8192,
            max_input_tokens: 400_000,
        }
    }
}

impl GatewaySettings {
    pub fn temperature(&self, role: AgentRole) -> f64 {
        self.temperatures.get(&role.key()).copied().unwrap_or(self.default_temperature)
    }
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    settings: GatewaySettings,
    clock: SharedClock,
    log: Option<Mutex<File>>,
    records: Mutex<Vec<CallRecord>>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            settings: GatewaySettings::default(),
            clock: Arc::new(SystemClock),
            log: None,
            records: Mutex::new(Vec::new()),
        }
    }

    pub fn with_settings(mut self, settings: GatewaySettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn with_clock(mut self, clock: SharedClock) -> Self {
        self.clock = clock;
        self
    }

    /// Append call records to a JSON-lines file.
    pub fn with_call_log(mut self, path: &Path) -> std::io::Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        self.log = Some(Mutex::new(f));
        Ok(self)
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    pub fn descriptor(&self) -> &BackendDescriptor {
        self.backend.descriptor()
    }

    pub fn settings(&self) -> &GatewaySettings {
        &self.settings
    }

    /// A request carrying this role's sampling settings.
    pub fn request(&self, role: AgentRole, system_prompt: String, messages: Vec<Message>) -> ChatRequest {
        ChatRequest {
            agent_role: role,
            system_prompt,
            messages,
            temperature: self.settings.temperature(role),
            max_output_tokens: self.settings.max_output_tokens,
        }
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        request.check()?;
        let needed = request.estimated_input_tokens();
        if needed > self.settings.max_input_tokens {
            return Err(LlmError::BudgetExceeded { needed, budget: self.settings.max_input_tokens });
        }
        let started = Instant::now();
        let result = self.backend.complete(request);
        let latency_ms = started.elapsed().as_millis() as u64;
        let record = match &result {
            Ok(c) => CallRecord {
                ts: self.clock.now_rfc3339(),
                agent_role: request.agent_role.key(),
                tokens_in: c.tokens_in.unwrap_or(needed),
                tokens_out: c.tokens_out.unwrap_or_else(|| estimate_tokens(&c.text)),
                latency_ms,
                retries: c.retries,
                ok: true,
                error: None,
            },
            Err(e) => CallRecord {
                ts: self.clock.now_rfc3339(),
                agent_role: request.agent_role.key(),
                tokens_in: needed,
                tokens_out: 0,
                latency_ms,
                retries: match e {
                    LlmError::Transport { attempts, .. } => attempts.saturating_sub(1),
                    _ => 0,
                },
                ok: false,
                error: Some(e.to_string()),
            },
        };
        self.append(record);
        result.map(|c| c.text)
    }

    fn append(&self, record: CallRecord) {
        if let Some(log) = &self.log {
            let line = serde_json::to_string(&record).expect("call record serializes");
            let mut f = log.lock().unwrap_or_else(|e| e.into_inner());
            if let Err(e) = writeln!(f, "{line}") {
                tracing::warn!(error = %e, "call log write failed");
            }
        }
        self.records.lock().unwrap_or_else(|e| e.into_inner()).push(record);
    }

    /// Records of calls made through this gateway instance.
    pub fn records(&self) -> Vec<CallRecord> {
        self.records.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

/// Successful calls per role in a call log, used to resume scripted runs.
pub fn consumed_by_role(call_log: &Path) -> std::io::Result<BTreeMap<String, u32>> {
    let mut out = BTreeMap::new();
    let text = match std::fs::read_to_string(call_log) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(e),
    };
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        if let Ok(r) = serde_json::from_str::<CallRecord>(line) {
            if r.ok {
                *out.entry(r.agent_role).or_insert(0) += 1;
            }
        }
    }
    Ok(out)
}
