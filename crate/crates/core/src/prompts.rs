//! Agent prompt templates, stored verbatim as text assets.

use std::collections::BTreeMap;

use crate::template::{self, TemplateError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptId {
    Planner,
    Reflector,
    Supervisor,
    CoderTask,
    CoderClient,
    CoderStrategy,
    CoderServer,
    CoderRunner,
    Tester,
    Evaluator,
    Debugger,
}

impl PromptId {
    pub const ALL: [PromptId; 11] = [
        PromptId::Planner,
        PromptId::Reflector,
        PromptId::Supervisor,
        PromptId::CoderTask,
        PromptId::CoderClient,
        PromptId::CoderStrategy,
        PromptId::CoderServer,
        PromptId::CoderRunner,
        PromptId::Tester,
        PromptId::Evaluator,
        PromptId::Debugger,
    ];

    pub fn source(self) -> &'static str {
        match self {
            PromptId::Planner => include_str!("../assets/prompts/planner.txt"),
            PromptId::Reflector => include_str!("../assets/prompts/reflector.txt"),
            PromptId::Supervisor => include_str!("../assets/prompts/supervisor.txt"),
            PromptId::CoderTask => include_str!("../assets/prompts/coder_task.txt"),
            PromptId::CoderClient => include_str!("../assets/prompts/coder_client.txt"),
            PromptId::CoderStrategy => include_str!("../assets/prompts/coder_strategy.txt"),
            PromptId::CoderServer => include_str!("../assets/prompts/coder_server.txt"),
            PromptId::CoderRunner => include_str!("../assets/prompts/coder_runner.txt"),
            PromptId::Tester => include_str!("../assets/prompts/tester.txt"),
            PromptId::Evaluator => include_str!("../assets/prompts/evaluator.txt"),
            PromptId::Debugger => include_str!("../assets/prompts/debugger.txt"),
        }
    }

    pub fn render(self, vars: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        template::render(self.source(), vars)
    }
}

/// Tool identifiers shown to agents in the `Available Tools` line.
pub const DOCS_TOOL: &str = "search_docs";
pub const SEARCH_TOOL: &str = "web_search";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::placeholders;

    #[test]
    fn placeholder_sets_are_stable() {
        let expect: &[(PromptId, &[&str])] = &[
            (
                PromptId::Planner,
                &[
                    "criteria",
                    "data",
                    "docs_tool",
                    "local_epochs",
                    "model",
                    "num_clients",
                    "privacy",
                    "rounds",
                    "search_tool",
                    "split_method",
                ],
            ),
            (PromptId::Reflector, &["current_plan", "message", "user_query"]),
            (PromptId::Supervisor, &["docs_tool", "research_plan", "search_tool"]),
            (PromptId::CoderTask, &["codebase", "task", "test_feedback"]),
            (PromptId::Evaluator, &["returncode", "stderr", "stdout"]),
            (
                PromptId::Debugger,
                &[
                    "code_client_app",
                    "code_run",
                    "code_server_app",
                    "code_strategy",
                    "code_task",
                    "error_feedback",
                ],
            ),
        ];
        for (id, names) in expect {
            let got: Vec<String> = placeholders(id.source()).into_iter().collect();
            assert_eq!(got, names.iter().map(|s| s.to_string()).collect::<Vec<_>>(), "{id:?}");
        }
    }

    #[test]
    fn literal_braces_survive() {
        let mut vars = BTreeMap::new();
        for name in placeholders(PromptId::Planner.source()) {
            vars.insert(Box::leak(name.into_boxed_str()) as &str, "X".to_string());
        }
        let out = PromptId::Planner.render(&vars).unwrap();
        assert!(out.contains(r#"Action Input: {"query": "[specific search terms or request]""#));
        assert!(out.contains("\nPLAN:\n"));
    }
}
