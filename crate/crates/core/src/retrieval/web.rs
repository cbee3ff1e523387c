//! The `web_search` tool boundary.

use std::collections::BTreeMap;
use std::time::Duration;

use serde_json::{json, Value};

/// Observation text returned when the provider cannot be reached.
pub const SEARCH_UNAVAILABLE: &str = "search-unavailable";

pub trait WebSearch: Send + Sync {
    fn search(&self, query: &str, context: &str) -> Result<String, String>;
}

/// Canned results keyed by exact query text.
#[derive(Debug, Clone, Default)]
pub struct StubWebSearch {
    pub fixtures: BTreeMap<String, String>,
}

impl StubWebSearch {
    pub fn with(mut self, query: &str, result: &str) -> Self {
        self.fixtures.insert(query.to_string(), result.to_string());
        self
    }
}

impl WebSearch for StubWebSearch {
    fn search(&self, query: &str, _context: &str) -> Result<String, String> {
        Ok(self.fixtures.get(query).cloned().unwrap_or_else(|| "no results".to_string()))
    }
}

/// A Tavily-style JSON search endpoint: POST {api_key, query, max_results},
/// reply {results: [{title, content, url}]}.
pub struct HttpWebSearch {
    endpoint: String,
    api_key: Option<String>,
    max_results: usize,
    agent: ureq::Agent,
}

impl HttpWebSearch {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key,
            max_results: 5,
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).build(),
        }
    }
}

impl WebSearch for HttpWebSearch {
    fn search(&self, query: &str, _context: &str) -> Result<String, String> {
        let body = json!({"api_key": self.api_key, "query": query, "max_results": self.max_results});
        let v: Value = self
            .agent
            .post(&self.endpoint)
            .send_json(body)
            .map_err(|e| e.to_string())?
            .into_json()
            .map_err(|e| e.to_string())?;
        let results = v.get("results").and_then(Value::as_array).cloned().unwrap_or_default();
        let lines: Vec<String> = results
            .iter()
            .take(self.max_results)
            .map(|r| {
                let title = r.get("title").and_then(Value::as_str).unwrap_or("");
                let content = r.get("content").and_then(Value::as_str).unwrap_or("");
                format!("{title}: {content}")
            })
            .collect();
        Ok(if lines.is_empty() { "no results".into() } else { lines.join("\n") })
    }
}
