//! Benchmark registry and the structured task-query model.
//!
//! Every benchmark task is a natural-language query built from three clauses:
//! a deployment clause (`I need to deploy ...`), a data clause (`Each client
//! holds ...`) and a request clause (`Help me build ...`). The registry stores
//! the query verbatim next to the structured fields restated from it.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::{PromptId, DOCS_TOOL, SEARCH_TOOL};
use crate::template::TemplateError;

const SHIPPED_REGISTRY: &str = include_str!("../assets/benchmark/ourbench.registry");

const DEPLOYMENT_OPENER: &str = "I need to deploy";
const DATA_OPENER: &str = "Each ";
const REQUEST_OPENER: &str = "Help me build";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ResearchArea {
    HeterogeneousFL,
    CommunicationEfficient,
    Personalized,
    FederatedActiveLearning,
    FederatedContinualLearning,
}

impl ResearchArea {
    pub const ALL: [ResearchArea; 5] = [
        ResearchArea::HeterogeneousFL,
        ResearchArea::CommunicationEfficient,
        ResearchArea::Personalized,
        ResearchArea::FederatedActiveLearning,
        ResearchArea::FederatedContinualLearning,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProblemSymbol {
    QuantitySkew,
    FeatureSkew,
    LabelSkew,
    DistributionSkew,
    CommunicationOverhead,
    CatastrophicForgetting,
    ResourceConstraint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    GlobalTestAccuracy,
    AvgClientAccuracy,
    AvgTaskAccuracy,
}

impl Metric {
    pub fn describe(self) -> &'static str {
        match self {
            Metric::GlobalTestAccuracy => "global test accuracy",
            Metric::AvgClientAccuracy => "average client test accuracy",
            Metric::AvgTaskAccuracy => "average task accuracy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskQuery {
    pub id: String,
    pub research_area: ResearchArea,
    pub challenge: String,
    pub problem_symbols: BTreeSet<ProblemSymbol>,
    pub application: String,
    pub num_clients: u32,
    pub dataset: String,
    pub model: String,
    pub metric: Metric,
    pub raw_query: String,
    /// Free-form remark, e.g. where the source tables disagree.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    CrossSilo,
    CrossDevice,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Partitioner {
    IID,
    Dirichlet { alpha: f64 },
    Exponential,
}

impl Partitioner {
    pub fn describe(&self) -> String {
        match self {
            Partitioner::IID => "IidPartitioner (IID)".to_string(),
            Partitioner::Dirichlet { alpha } => format!("DirichletPartitioner with alpha={alpha}"),
            Partitioner::Exponential => "ExponentialPartitioner (long-tail)".to_string(),
        }
    }
}

fn default_rounds() -> u32 {
    100
}
fn default_local_epochs() -> u32 {
    5
}
fn default_split() -> (f64, f64) {
    (0.8, 0.2)
}
fn default_seed() -> i64 {
    42
}
fn default_scenario() -> Scenario {
    Scenario::CrossDevice
}
fn default_partitioner() -> Partitioner {
    Partitioner::Dirichlet { alpha: 0.5 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_rounds")]
    pub communication_rounds: u32,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: u32,
    #[serde(default = "default_scenario")]
    pub scenario: Scenario,
    #[serde(default = "default_partitioner")]
    pub partitioner: Partitioner,
    #[serde(default = "default_split")]
    pub train_test_split: (f64, f64),
    #[serde(default = "default_seed")]
    pub split_seed: i64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            communication_rounds: default_rounds(),
            local_epochs: default_local_epochs(),
            scenario: default_scenario(),
            partitioner: default_partitioner(),
            train_test_split: default_split(),
            split_seed: default_seed(),
        }
    }
}

impl ExperimentConfig {
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.communication_rounds == 0 {
            out.push(Violation::NonPositive("communication_rounds"));
        }
        if self.local_epochs == 0 {
            out.push(Violation::NonPositive("local_epochs"));
        }
        if let Partitioner::Dirichlet { alpha } = self.partitioner {
            if !(alpha > 0.0) || !alpha.is_finite() {
                out.push(Violation::NonPositive("partitioner.alpha"));
            }
        }
        let (train, test) = self.train_test_split;
        if train < 0.0 || test < 0.0 || (train + test - 1.0).abs() > 1e-9 {
            out.push(Violation::SplitNotUnit(train, test));
        }
        out
    }
}

/// A template or consistency problem found in a query. Violations are data,
/// not faults.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    MissingDeploymentClause,
    MissingDataClause,
    MissingRequestClause,
    ClausesOutOfOrder,
    MalformedId(String),
    EmptyField(&'static str),
    NoProblemSymbols,
    /// `num_clients` must be at least 1.
    NumClientsZero,
    /// The client count stated in the deployment clause differs from `num_clients`.
    ClientCountMismatch { stated: u32, field: u32 },
    NonPositive(&'static str),
    SplitNotUnit(f64, f64),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingDeploymentClause => write!(f, "missing-deployment-clause"),
            Violation::MissingDataClause => write!(f, "missing-data-clause"),
            Violation::MissingRequestClause => write!(f, "missing-request-clause"),
            Violation::ClausesOutOfOrder => write!(f, "clauses-out-of-order"),
            Violation::MalformedId(id) => write!(f, "malformed-id: {id}"),
            Violation::EmptyField(name) => write!(f, "empty-field: {name}"),
            Violation::NoProblemSymbols => write!(f, "no-problem-symbols"),
            Violation::NumClientsZero => write!(f, "num_clients>=1"),
            Violation::ClientCountMismatch { stated, field } => {
                write!(f, "client-count-mismatch: query says {stated}, num_clients={field}")
            }
            Violation::NonPositive(name) => write!(f, "{name} must be positive"),
            Violation::SplitNotUnit(a, b) => write!(f, "train/test split {a}/{b} does not sum to 1"),
        }
    }
}

/// Byte offset of the first sentence that starts with `opener`.
fn clause_start(text: &str, opener: &str) -> Option<usize> {
    let trimmed = text.trim_start_matches(|c: char| c.is_whitespace() || c == '"');
    let lead = text.len() - trimmed.len();
    if trimmed.starts_with(opener) {
        return Some(lead);
    }
    text.match_indices(opener).map(|(i, _)| i).find(|&i| {
        let before = text[..i].trim_end();
        before.ends_with('.') || before.ends_with('!') || before.ends_with('?')
    })
}

fn first_integer(s: &str) -> Option<u32> {
    let start = s.find(|c: char| c.is_ascii_digit())?;
    let digits: String = s[start..].chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

pub fn validate_template(q: &TaskQuery) -> Vec<Violation> {
    let mut out = Vec::new();
    let raw = q.raw_query.as_str();
    let deploy = clause_start(raw, DEPLOYMENT_OPENER);
    let data = clause_start(raw, DATA_OPENER);
    let request = clause_start(raw, REQUEST_OPENER);
    if deploy.is_none() {
        out.push(Violation::MissingDeploymentClause);
    }
    if data.is_none() {
        out.push(Violation::MissingDataClause);
    }
    if request.is_none() {
        out.push(Violation::MissingRequestClause);
    }
    if let (Some(d), Some(m), Some(r)) = (deploy, data, request) {
        if !(d < m && m < r) {
            out.push(Violation::ClausesOutOfOrder);
        }
    }

    let id_ok = q.id.len() > 1
        && q.id.starts_with('Q')
        && q.id[1..].chars().all(|c| c.is_ascii_digit());
    if !id_ok {
        out.push(Violation::MalformedId(q.id.clone()));
    }
    for (name, value) in [
        ("challenge", &q.challenge),
        ("application", &q.application),
        ("dataset", &q.dataset),
        ("model", &q.model),
    ] {
        if value.trim().is_empty() {
            out.push(Violation::EmptyField(name));
        }
    }
    if q.problem_symbols.is_empty() {
        out.push(Violation::NoProblemSymbols);
    }
    if q.num_clients == 0 {
        out.push(Violation::NumClientsZero);
    } else if let Some(d) = deploy {
        let end = data.filter(|&m| m > d).unwrap_or(raw.len());
        if let Some(stated) = first_integer(&raw[d..end]) {
            if stated != q.num_clients {
                out.push(Violation::ClientCountMismatch {
                    stated,
                    field: q.num_clients,
                });
            }
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("query {id} violates the template: {violations:?}")]
    Precondition { id: String, violations: Vec<Violation> },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Placeholder bindings for the planner prompt derived from a query.
pub fn planning_bindings(q: &TaskQuery, c: &ExperimentConfig) -> BTreeMap<&'static str, String> {
    let scenario = match c.scenario {
        Scenario::CrossSilo => "cross-silo",
        Scenario::CrossDevice => "cross-device",
    };
    let (train, test) = c.train_test_split;
    BTreeMap::from([
        ("model", q.model.clone()),
        ("data", q.dataset.clone()),
        ("num_clients", format!("{} clients ({scenario})", q.num_clients)),
        (
            "split_method",
            format!(
                "{}; {:.0}/{:.0} train/test split with seed={}",
                c.partitioner.describe(),
                train * 100.0,
                test * 100.0,
                c.split_seed
            ),
        ),
        ("local_epochs", c.local_epochs.to_string()),
        ("rounds", c.communication_rounds.to_string()),
        ("criteria", q.metric.describe().to_string()),
        ("privacy", "None".to_string()),
        ("docs_tool", DOCS_TOOL.to_string()),
        ("search_tool", SEARCH_TOOL.to_string()),
    ])
}

/// Render the planner's system prompt with the query's technical setup bound.
pub fn to_planning_prompt_context(q: &TaskQuery, c: &ExperimentConfig) -> Result<String, ContextError> {
    let mut violations = validate_template(q);
    violations.extend(c.violations());
    if !violations.is_empty() {
        return Err(ContextError::Precondition {
            id: q.id.clone(),
            violations,
        });
    }
    Ok(PromptId::Planner.render(&planning_bindings(q, c))?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistryEntry {
    pub query: TaskQuery,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchmarkRegistry {
    entries: Vec<RegistryEntry>,
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("cannot read registry {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("registry parse error at line {line}, column {column}{}: {message}", field.as_ref().map(|f| format!(" (field `{f}`)")).unwrap_or_default())]
    Parse {
        line: usize,
        column: usize,
        field: Option<String>,
        message: String,
    },
    #[error("duplicate task id {0}")]
    DuplicateId(String),
    #[error("task {id} is invalid: {violations:?}")]
    Invalid { id: String, violations: Vec<Violation> },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryDoc {
    task: Vec<EntryDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryDoc {
    id: String,
    research_area: ResearchArea,
    challenge: String,
    problem_symbols: BTreeSet<ProblemSymbol>,
    application: String,
    num_clients: u32,
    dataset: String,
    model: String,
    metric: Metric,
    raw_query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    note: Option<String>,
    #[serde(default)]
    config: ExperimentConfig,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let column = offset - before.rfind('\n').map(|i| i + 1).unwrap_or(0) + 1;
    (line, column)
}

fn backticked(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_string())
}

impl BenchmarkRegistry {
    /// The 16-task registry bundled with the crate.
    pub fn shipped() -> Self {
        Self::parse(SHIPPED_REGISTRY).expect("bundled registry is well-formed")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RegistryError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| RegistryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, RegistryError> {
        if text.trim().is_empty() {
            return Err(RegistryError::Parse {
                line: 1,
                column: 1,
                field: Some("task".into()),
                message: "empty registry document".into(),
            });
        }
        let doc: RegistryDoc = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map(|s| line_col(text, s.start)).unwrap_or((1, 1));
            RegistryError::Parse {
                line,
                column,
                field: backticked(e.message()),
                message: e.message().to_string(),
            }
        })?;
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(doc.task.len());
        for e in doc.task {
            if !seen.insert(e.id.clone()) {
                return Err(RegistryError::DuplicateId(e.id));
            }
            let config_violations = e.config.violations();
            if !config_violations.is_empty() {
                return Err(RegistryError::Invalid {
                    id: e.id,
                    violations: config_violations,
                });
            }
            entries.push(RegistryEntry {
                query: TaskQuery {
                    id: e.id,
                    research_area: e.research_area,
                    challenge: e.challenge,
                    problem_symbols: e.problem_symbols,
                    application: e.application,
                    num_clients: e.num_clients,
                    dataset: e.dataset,
                    model: e.model,
                    metric: e.metric,
                    raw_query: e.raw_query,
                    note: e.note,
                },
                config: e.config,
            });
        }
        Ok(Self { entries })
    }

    pub fn to_document(&self) -> String {
        let doc = RegistryDoc {
            task: self
                .entries
                .iter()
                .map(|e| EntryDoc {
                    id: e.query.id.clone(),
                    research_area: e.query.research_area,
                    challenge: e.query.challenge.clone(),
                    problem_symbols: e.query.problem_symbols.clone(),
                    application: e.query.application.clone(),
                    num_clients: e.query.num_clients,
                    dataset: e.query.dataset.clone(),
                    model: e.query.model.clone(),
                    metric: e.query.metric,
                    raw_query: e.query.raw_query.clone(),
                    note: e.query.note.clone(),
                    config: e.config.clone(),
                })
                .collect(),
        };
        toml::to_string(&doc).expect("registry serializes")
    }

    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&RegistryEntry> {
        self.entries.iter().find(|e| e.query.id == id)
    }

    pub fn area_counts(&self) -> BTreeMap<ResearchArea, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.query.research_area).or_insert(0) += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(id: &str) -> TaskQuery {
        BenchmarkRegistry::shipped().get(id).unwrap().query.clone()
    }

    #[test]
    fn shipped_registry_basics() {
        let reg = BenchmarkRegistry::shipped();
        assert_eq!(reg.len(), 16);
        let q1 = &reg.get("Q1").unwrap().query;
        assert_eq!(q1.dataset, "CIFAR-10-LT");
        assert_eq!(q1.model, "MobileNet-V1");
        assert_eq!(q1.num_clients, 15);
        let q16 = reg.get("Q16").unwrap();
        assert_eq!(q16.query.metric, Metric::AvgTaskAccuracy);
        assert_eq!(q16.config.communication_rounds, 100);
        assert!(q16.query.challenge.contains("5 sequential"));
        assert!(reg.get("Q2").unwrap().query.note.is_some());
    }

    #[test]
    fn every_shipped_query_follows_the_template() {
        for e in BenchmarkRegistry::shipped().entries() {
            assert_eq!(validate_template(&e.query), vec![], "{}", e.query.id);
        }
    }

    #[test]
    fn degenerate_query_misses_clauses() {
        let mut query = q("Q12");
        query.raw_query = "hello".into();
        let v = validate_template(&query);
        assert!(v.contains(&Violation::MissingDeploymentClause));
        assert!(v.contains(&Violation::MissingRequestClause));
    }

    #[test]
    fn zero_clients_is_a_violation() {
        let mut query = q("Q9");
        query.num_clients = 0;
        assert!(validate_template(&query).contains(&Violation::NumClientsZero));
    }

    #[test]
    fn stated_client_count_must_match() {
        let mut query = q("Q4");
        query.num_clients = 7;
        assert_eq!(
            validate_template(&query),
            vec![Violation::ClientCountMismatch { stated: 4, field: 7 }]
        );
    }

    #[test]
    fn empty_document_is_a_parse_error() {
        match BenchmarkRegistry::parse("   \n") {
            Err(RegistryError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_field_is_located() {
        let text = BenchmarkRegistry::shipped().to_document().replacen(
            "dataset = \"CIFAR-10-LT\"",
            "dataset = \"CIFAR-10-LT\"\ncolour = \"blue\"",
            1,
        );
        match BenchmarkRegistry::parse(&text) {
            Err(RegistryError::Parse { line, field, .. }) => {
                assert_eq!(field.as_deref(), Some("colour"));
                let expected = text.lines().position(|l| l.starts_with("colour")).unwrap() + 1;
                assert!(line <= expected && line + 12 >= expected, "line {line} vs {expected}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let doc = BenchmarkRegistry::shipped().to_document();
        let doubled = format!("{doc}\n{}", &doc[doc.find("[[task]]").unwrap()..]);
        assert!(matches!(
            BenchmarkRegistry::parse(&doubled),
            Err(RegistryError::DuplicateId(id)) if id == "Q1"
        ));
    }

    #[test]
    fn config_defaults() {
        let c = ExperimentConfig::default();
        assert_eq!(c.communication_rounds, 100);
        assert_eq!(c.local_epochs, 5);
        assert_eq!(c.train_test_split, (0.8, 0.2));
        assert_eq!(c.split_seed, 42);
        let bad = ExperimentConfig {
            partitioner: Partitioner::Dirichlet { alpha: 0.0 },
            train_test_split: (0.7, 0.2),
            ..c
        };
        assert_eq!(bad.violations().len(), 2);
    }

    #[test]
    fn planning_context_binds_setup() {
        let reg = BenchmarkRegistry::shipped();
        let e = reg.get("Q1").unwrap();
        let ctx = to_planning_prompt_context(&e.query, &e.config).unwrap();
        assert!(ctx.contains("Model Architecture: MobileNet-V1"));
        assert!(ctx.contains("Client Configuration: 15 clients"));
        assert!(ctx.contains("Local Training Epochs: 5 "));
        assert!(ctx.contains("Communication Rounds: 100"));
        assert!(!ctx.contains("{model}"));
    }

    #[test]
    fn planning_context_requires_valid_query() {
        let reg = BenchmarkRegistry::shipped();
        let e = reg.get("Q3").unwrap();
        let mut query = e.query.clone();
        query.raw_query = "hello".into();
        assert!(matches!(
            to_planning_prompt_context(&query, &e.config),
            Err(ContextError::Precondition { .. })
        ));
    }
}
