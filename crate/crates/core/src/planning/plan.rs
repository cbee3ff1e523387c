//! The PLAN document: parsing, canonical serialization and rule checks.

use std::collections::BTreeMap;
use std::fmt;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetupKey {
    Model,
    Data,
    NumClients,
    SplitMethod,
    LocalEpochs,
    Criteria,
    Privacy,
}

impl SetupKey {
    pub const ALL: [SetupKey; 7] = [
        SetupKey::Model,
        SetupKey::Data,
        SetupKey::NumClients,
        SetupKey::SplitMethod,
        SetupKey::LocalEpochs,
        SetupKey::Criteria,
        SetupKey::Privacy,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SetupKey::Model => "Model Architecture",
            SetupKey::Data => "Datasets",
            SetupKey::NumClients => "Client Configuration",
            SetupKey::SplitMethod => "Data Partition Strategy",
            SetupKey::LocalEpochs => "Local Training Epochs",
            SetupKey::Criteria => "Evaluation Criteria",
            SetupKey::Privacy => "Privacy Mechanisms",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SetupKey::Model => "model",
            SetupKey::Data => "data",
            SetupKey::NumClients => "num_clients",
            SetupKey::SplitMethod => "split_method",
            SetupKey::LocalEpochs => "local_epochs",
            SetupKey::Criteria => "criteria",
            SetupKey::Privacy => "privacy",
        }
    }

    pub fn from_label(label: &str) -> Option<SetupKey> {
        let l = label.to_ascii_lowercase();
        let l = l.trim();
        if l == "dataset" {
            return Some(SetupKey::Data);
        }
        Self::ALL.into_iter().find(|k| k.label().eq_ignore_ascii_case(l))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResearchPlan {
    pub raw_text: String,
    pub summary: String,
    pub challenges: String,
    pub tasks: Vec<String>,
    pub technical_setup: BTreeMap<SetupKey, String>,
    /// Setup lines with labels outside the seven keys, e.g. communication rounds.
    #[serde(default)]
    pub extra_setup: BTreeMap<String, String>,
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("missing-PLAN-marker")]
    MissingPlanMarker,
    #[error("unparsable-setup: missing {0:?}")]
    UnparsableSetup(Vec<SetupKey>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanViolation {
    MissingSummary,
    MissingChallenges,
    MissingTasks,
    MissingSetup(SetupKey),
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanViolation::MissingSummary => f.write_str("missing-summary"),
            PlanViolation::MissingChallenges => f.write_str("missing-challenges"),
            PlanViolation::MissingTasks => f.write_str("missing-tasks"),
            PlanViolation::MissingSetup(k) => write!(f, "missing-setup:{}", k.name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Summary,
    Challenges,
    Tasks,
    Setup,
    Other,
}

fn header_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:#+\s*)?\**(\d+)\.\s*\**\s*([A-Za-z][A-Za-z /&-]{0,40}?)\s*\**:\**\s*(.*)$").unwrap())
}

fn item_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:\d+[.)]|[-*])\s+(.*)$").unwrap())
}

fn known_section(name: &str) -> Option<Section> {
    match name.trim().to_ascii_lowercase().as_str() {
        "summary" => Some(Section::Summary),
        "challenges" | "key challenges" => Some(Section::Challenges),
        "tasks" => Some(Section::Tasks),
        "technical setup" => Some(Section::Setup),
        _ => None,
    }
}

/// True when a plan line is the marker alone.
pub fn has_plan_marker(text: &str) -> bool {
    text.lines().any(|l| l.trim().trim_matches('*') == "PLAN:")
}

fn push_line(buf: &mut String, line: &str) {
    let t = line.trim();
    if t.is_empty() {
        return;
    }
    if !buf.is_empty() {
        buf.push('\n');
    }
    buf.push_str(t);
}

/// Parse the PLAN format; `raw_text` keeps the whole reply verbatim.
pub fn parse_plan(text: &str, version: u32) -> Result<ResearchPlan, PlanError> {
    let mut lines = text.lines();
    lines.by_ref().find(|l| l.trim().trim_matches('*') == "PLAN:").ok_or(PlanError::MissingPlanMarker)?;

    let mut summary = String::new();
    let mut challenges = String::new();
    let mut tasks: Vec<String> = Vec::new();
    let mut setup = BTreeMap::new();
    let mut extra = BTreeMap::new();
    let mut section: Option<Section> = None;
    let mut last_number = 0u32;

    for line in lines {
        let unindented = !line.starts_with([' ', '\t']);
        if unindented {
            if let Some(c) = header_re().captures(line) {
                let number: u32 = c[1].parse().unwrap_or(0);
                let name = &c[2];
                let rest = c[3].trim();
                let known = known_section(name);
                if known.is_some() || number == last_number + 1 {
                    last_number = number;
                    let s = known.unwrap_or(Section::Other);
                    section = Some(s);
                    match s {
                        Section::Summary => push_line(&mut summary, rest),
                        Section::Challenges => push_line(&mut challenges, rest),
                        _ => {}
                    }
                    continue;
                }
            }
        }
        match section {
            Some(Section::Summary) => push_line(&mut summary, line),
            Some(Section::Challenges) => push_line(&mut challenges, line),
            Some(Section::Tasks) => {
                if let Some(c) = item_re().captures(line) {
                    let t = c[1].trim();
                    if !t.is_empty() {
                        tasks.push(t.to_string());
                    }
                } else if let Some(last) = tasks.last_mut() {
                    push_line(last, line);
                } else if !line.trim().is_empty() {
                    tasks.push(line.trim().to_string());
                }
            }
            Some(Section::Setup) => {
                let t = line.trim().trim_start_matches(['-', '*']).trim();
                if let Some((label, value)) = t.split_once(':') {
                    let label = label.trim().trim_matches('*').trim();
                    let value = value.trim().trim_matches('*').trim().to_string();
                    match SetupKey::from_label(label) {
                        Some(k) => {
                            setup.insert(k, value);
                        }
                        None if !label.is_empty() => {
                            extra.insert(label.to_string(), value);
                        }
                        None => {}
                    }
                }
            }
            Some(Section::Other) | None => {}
        }
    }

    setup.entry(SetupKey::Privacy).or_insert_with(|| "None".to_string());
    let missing: Vec<SetupKey> = SetupKey::ALL.into_iter().filter(|k| !setup.contains_key(k)).collect();
    if !missing.is_empty() {
        return Err(PlanError::UnparsableSetup(missing));
    }
    Ok(ResearchPlan {
        raw_text: text.to_string(),
        summary,
        challenges,
        tasks,
        technical_setup: setup,
        extra_setup: extra,
        version,
    })
}

/// Canonical PLAN text for a plan's parsed fields.
pub fn serialize_plan(plan: &ResearchPlan) -> String {
    let indent = |s: &str| s.lines().map(|l| format!("   {l}")).collect::<Vec<_>>().join("\n");
    let mut out = String::from("PLAN:\n");
    out.push_str("1. Summary:\n");
    out.push_str(&indent(&plan.summary));
    out.push_str("\n2. Challenges:\n");
    out.push_str(&indent(&plan.challenges));
    out.push_str("\n3. Tasks:\n");
    for (i, t) in plan.tasks.iter().enumerate() {
        let mut lines = t.lines();
        out.push_str(&format!("   {}. {}\n", i + 1, lines.next().unwrap_or("")));
        for l in lines {
            out.push_str(&format!("      {l}\n"));
        }
    }
    out.push_str("4. Technical Setup:\n");
    for k in SetupKey::ALL {
        if let Some(v) = plan.technical_setup.get(&k) {
            out.push_str(&format!("   - {}: {}\n", k.label(), v));
        }
    }
    for (label, v) in &plan.extra_setup {
        out.push_str(&format!("   - {label}: {v}\n"));
    }
    out
}

pub fn rule_check_plan(plan: &ResearchPlan) -> Vec<PlanViolation> {
    let mut out = Vec::new();
    if plan.summary.trim().is_empty() {
        out.push(PlanViolation::MissingSummary);
    }
    if plan.challenges.trim().is_empty() {
        out.push(PlanViolation::MissingChallenges);
    }
    if plan.tasks.iter().all(|t| t.trim().is_empty()) {
        out.push(PlanViolation::MissingTasks);
    }
    for k in SetupKey::ALL {
        let v = plan.technical_setup.get(&k).map(|s| s.trim());
        if k != SetupKey::Privacy && v.map_or(true, str::is_empty) {
            out.push(PlanViolation::MissingSetup(k));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerdictStatus {
    #[serde(rename = "COMPLETE")]
    Complete,
    #[serde(rename = "INCOMPLETE")]
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionVerdict {
    pub status: VerdictStatus,
    pub justification: String,
    /// Plan version the verdict refers to.
    pub plan_version: u32,
}

pub const UNPARSABLE: &str = "unparsable";

/// Parse a reflector reply. Leading whitespace is ignored; anything not
/// starting with `COMPLETE:` or `INCOMPLETE:` counts as INCOMPLETE.
pub fn parse_verdict(text: &str, plan_version: u32) -> ReflectionVerdict {
    let t = text.trim_start();
    let (status, rest) = if let Some(rest) = t.strip_prefix("COMPLETE:") {
        (VerdictStatus::Complete, rest)
    } else if let Some(rest) = t.strip_prefix("INCOMPLETE:") {
        (VerdictStatus::Incomplete, rest)
    } else {
        return ReflectionVerdict {
            status: VerdictStatus::Incomplete,
            justification: UNPARSABLE.to_string(),
            plan_version,
        };
    };
    ReflectionVerdict { status, justification: rest.trim().to_string(), plan_version }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub const Q12_PLAN: &str = "Thought: I have enough information.\n\nPLAN:\n1. Summary: Build a personalized federated handwriting recognizer for 15 clients.\n2. Challenges: Feature skew across writers; personalization versus a shared model.\n3. Tasks:\n   1. Partition FEMNIST by writer.\n   2. Train a CNN with personalization layers (FedPer).\n   3. Evaluate average client test accuracy.\n4. Technical Setup:\n   - Model Architecture: CNN\n   - Datasets: FEMNIST\n   - Client Configuration: 15 clients (cross-device)\n   - Data Partition Strategy: DirichletPartitioner with alpha=0.5\n   - Local Training Epochs: 5\n   - Communication Rounds: 100\n   - Evaluation Criteria: average client test accuracy\n";

    #[test]
    fn parses_full_plan() {
        let p = parse_plan(Q12_PLAN, 1).unwrap();
        assert_eq!(p.technical_setup[&SetupKey::Model], "CNN");
        assert_eq!(p.technical_setup[&SetupKey::Privacy], "None");
        assert_eq!(p.tasks.len(), 3);
        assert_eq!(p.extra_setup["Communication Rounds"], "100");
        assert!(p.summary.starts_with("Build a personalized"));
        assert_eq!(p.raw_text, Q12_PLAN);
        assert_eq!(rule_check_plan(&p), vec![]);
    }

    #[test]
    fn marker_must_stand_alone() {
        assert_eq!(parse_plan("no plan here", 1), Err(PlanError::MissingPlanMarker));
        assert_eq!(parse_plan("The PLAN: is below", 1), Err(PlanError::MissingPlanMarker));
    }

    #[test]
    fn missing_setup_keys_reported() {
        let t = "PLAN:\n1. Summary: x\n2. Challenges: y\n3. Tasks:\n   1. z\n4. Technical Setup:\n   - Model Architecture: CNN\n";
        match parse_plan(t, 1) {
            Err(PlanError::UnparsableSetup(keys)) => {
                assert!(keys.contains(&SetupKey::Data));
                assert!(!keys.contains(&SetupKey::Privacy));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_tasks_flagged() {
        let mut p = parse_plan(Q12_PLAN, 1).unwrap();
        p.tasks.clear();
        assert_eq!(rule_check_plan(&p), vec![PlanViolation::MissingTasks]);
    }

    #[test]
    fn unknown_trailing_section_kept_in_raw_only() {
        let t = format!("{Q12_PLAN}5. Risks: none really\n   - Detail: ignored\n");
        let p = parse_plan(&t, 2).unwrap();
        assert!(!p.extra_setup.contains_key("Detail"));
        assert!(p.raw_text.contains("5. Risks"));
    }

    #[test]
    fn serialize_round_trip_on_example() {
        let p = parse_plan(Q12_PLAN, 1).unwrap();
        let text = serialize_plan(&p);
        let q = parse_plan(&text, 1).unwrap();
        assert_eq!(ResearchPlan { raw_text: text.clone(), ..p }, q);
    }

    #[test]
    fn verdicts() {
        let v = parse_verdict("COMPLETE: objectives, methodology, tasks present", 1);
        assert_eq!(v.status, VerdictStatus::Complete);
        assert_eq!(v.justification, "objectives, methodology, tasks present");
        assert_eq!(parse_verdict("INCOMPLETE: no methodology", 1).status, VerdictStatus::Incomplete);
        let v = parse_verdict("maybe fine", 1);
        assert_eq!((v.status, v.justification.as_str()), (VerdictStatus::Incomplete, UNPARSABLE));
    }
}
