//! Chat-completions over HTTP with retry, backoff and a request-rate cap.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, BackendDescriptor, BackendKind, ChatRequest, Completion, LlmError, MessageRole};
use crate::clock::{SharedClock, SharedSleeper, SystemClock, ThreadSleeper};

const WINDOW_MS: u64 = 60_000;

/// Admits at most `cap` requests in any 60 s window.
pub struct SlidingWindowLimiter {
    cap: usize,
    stamps: Mutex<VecDeque<u64>>,
    clock: SharedClock,
    sleeper: SharedSleeper,
}

impl SlidingWindowLimiter {
    pub fn new(cap: u32, clock: SharedClock, sleeper: SharedSleeper) -> Self {
        Self {
            cap: cap.max(1) as usize,
            stamps: Mutex::new(VecDeque::new()),
            clock,
            sleeper,
        }
    }

    /// Block until a request may be sent; returns the admission time.
    pub fn acquire(&self) -> u64 {
        let mut stamps = self.stamps.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            let now = self.clock.now_ms();
            while stamps.front().is_some_and(|&t| t + WINDOW_MS <= now) {
                stamps.pop_front();
            }
            if stamps.len() < self.cap {
                stamps.push_back(now);
                return now;
            }
            let wait = stamps[0] + WINDOW_MS - now;
            self.sleeper.sleep_ms(wait);
        }
    }
}

pub struct RemoteBackend {
    descriptor: BackendDescriptor,
    api_key: Option<String>,
    agent: ureq::Agent,
    limiter: SlidingWindowLimiter,
    sleeper: SharedSleeper,
    backoff_base_ms: u64,
}

impl RemoteBackend {
    pub fn new(descriptor: BackendDescriptor, api_key: Option<String>) -> Self {
        Self::with_time(descriptor, api_key, Arc::new(SystemClock), Arc::new(ThreadSleeper))
    }

    pub fn with_time(
        descriptor: BackendDescriptor,
        api_key: Option<String>,
        clock: SharedClock,
        sleeper: SharedSleeper,
    ) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(600)).build();
        Self {
            limiter: SlidingWindowLimiter::new(descriptor.per_minute_request_cap, clock, sleeper.clone()),
            descriptor,
            api_key,
            agent,
            sleeper,
            backoff_base_ms: 500,
        }
    }

    /// Endpoint and key from `FEDFORGE_LLM_ENDPOINT` / `FEDFORGE_LLM_KEY`.
    pub fn from_env(model_name: &str) -> Option<Self> {
        let endpoint = std::env::var(super::ENDPOINT_ENV).ok()?;
        let key = std::env::var(super::KEY_ENV).ok();
        Some(Self::new(BackendDescriptor::remote(endpoint, model_name), key))
    }

    pub fn with_backoff_base(mut self, ms: u64) -> Self {
        self.backoff_base_ms = ms;
        self
    }

    fn body(&self, r: &ChatRequest) -> Value {
        let mut messages = vec![json!({"role": "system", "content": r.system_prompt})];
        for m in &r.messages {
            let role = match m.role {
                MessageRole::User | MessageRole::Tool => "user",
                MessageRole::Assistant => "assistant",
            };
            messages.push(json!({"role": role, "content": m.content}));
        }
        json!({
            "model": self.descriptor.model_name,
            "messages": messages,
            "temperature": r.temperature,
            "max_tokens": r.max_output_tokens,
        })
    }
}

fn parse_reply(v: &Value) -> Option<(String, Option<u64>, Option<u64>)> {
    let text = v
        .pointer("/choices/0/message/content")
        .or_else(|| v.pointer("/content"))?
        .as_str()?
        .to_string();
    let tin = v.pointer("/usage/prompt_tokens").and_then(Value::as_u64);
    let tout = v.pointer("/usage/completion_tokens").and_then(Value::as_u64);
    Some((text, tin, tout))
}

impl Backend for RemoteBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn complete(&self, request: &ChatRequest) -> Result<Completion, LlmError> {
        debug_assert_eq!(self.descriptor.kind, BackendKind::RemoteHTTP);
        let endpoint = self
            .descriptor
            .endpoint
            .as_deref()
            .ok_or_else(|| LlmError::InvalidRequest("remote backend has no endpoint".into()))?;
        let body = self.body(request);
        let mut last_error = String::new();
        let max_attempts = self.descriptor.max_retries + 1;
        for attempt in 0..max_attempts {
            if attempt > 0 {
                self.sleeper.sleep_ms(self.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16)));
            }
            self.limiter.acquire();
            let mut call = self.agent.post(endpoint).set("Content-Type", "application/json");
            if let Some(key) = &self.api_key {
                call = call.set("Authorization", &format!("Bearer {key}"));
            }
            match call.send_json(body.clone()) {
                Ok(resp) => {
                    let v: Value = resp.into_json().map_err(|e| LlmError::Transport {
                        attempts: attempt + 1,
                        message: format!("bad response body: {e}"),
                    })?;
                    let (text, tokens_in, tokens_out) = parse_reply(&v).ok_or_else(|| LlmError::Transport {
                        attempts: attempt + 1,
                        message: "response has no message content".into(),
                    })?;
                    return Ok(Completion { text, retries: attempt, tokens_in, tokens_out });
                }
                Err(ureq::Error::Status(code, _)) if code == 429 || code >= 500 => {
                    tracing::warn!(code, attempt, "transient LLM error");
                    last_error = format!("status {code}");
                }
                Err(ureq::Error::Status(code, resp)) => {
                    let detail = resp.into_string().unwrap_or_default();
                    return Err(LlmError::Transport {
                        attempts: attempt + 1,
                        message: format!("status {code}: {detail}"),
                    });
                }
                Err(e) => {
                    tracing::warn!(error = %e, attempt, "LLM transport failure");
                    last_error = e.to_string();
                }
            }
        }
        Err(LlmError::Transport { attempts: max_attempts, message: last_error })
    }
}
