//! The supervisor's implementation plan, split per module.

use std::collections::BTreeMap;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebase::ModuleKind;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModulePlan {
    pub implementation_plan: String,
    pub configuration: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Blueprint {
    pub module_plans: BTreeMap<ModuleKind, ModulePlan>,
    pub interdependencies: Vec<String>,
    pub raw_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BlueprintError {
    #[error("missing-module-section: {0} Module Implementation")]
    MissingModuleSection(ModuleKind),
    #[error("missing-module-section: Module Interdependency")]
    MissingInterdependencies,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Part {
    Module(ModuleKind),
    Interdependency,
}

fn header_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^[\s#*]*(?:\d+\.)?[\s*]*(?:(task|client|server|strategy)\s+module\s+implementation|module\s+interdependenc(?:y|ies))\b[\s*:]*(.*)$")
            .unwrap()
    })
}

fn item_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:\d+[.)]|[-*])\s+(.*)$").unwrap())
}

fn config_pairs(text: &str, into: &mut BTreeMap<String, String>) {
    for piece in text.split(" / ") {
        let piece = piece.trim().trim_start_matches(['-', '*']).trim();
        if let Some((k, v)) = piece.split_once(':') {
            let (k, v) = (k.trim().trim_matches('*').trim(), v.trim());
            if !k.is_empty() && !v.is_empty() {
                into.insert(k.to_string(), v.to_string());
            }
        }
    }
}

impl Blueprint {
    pub fn parse(text: &str) -> Result<Self, BlueprintError> {
        let mut plans: BTreeMap<ModuleKind, ModulePlan> = BTreeMap::new();
        let mut inter: Vec<String> = Vec::new();
        let mut seen_inter = false;
        let mut part: Option<Part> = None;
        let mut in_config = false;

        for line in text.lines() {
            if let Some(c) = header_re().captures(line) {
                part = Some(match c.get(1) {
                    Some(m) => Part::Module(ModuleKind::parse_label(m.as_str()).expect("label from regex")),
                    None => {
                        seen_inter = true;
                        Part::Interdependency
                    }
                });
                in_config = false;
                if let Some(Part::Module(k)) = part {
                    plans.entry(k).or_default();
                }
                continue;
            }
            match part {
                Some(Part::Module(k)) => {
                    let plan = plans.get_mut(&k).expect("entry created at header");
                    let t = line.trim().trim_start_matches(['-', '*']).trim();
                    let upper = t.to_ascii_uppercase();
                    if let Some(rest) = upper.strip_prefix("CONFIGURATION") {
                        in_config = true;
                        let rest = &t[t.len() - rest.len()..];
                        config_pairs(rest.trim_start_matches([':', '*']), &mut plan.configuration);
                    } else if let Some(rest) = upper.strip_prefix("IMPLEMENTATION PLAN") {
                        in_config = false;
                        let rest = t[t.len() - rest.len()..].trim_start_matches([':', '*']).trim();
                        if !rest.is_empty() {
                            plan.implementation_plan.push_str(rest);
                            plan.implementation_plan.push('\n');
                        }
                    } else if in_config {
                        config_pairs(line, &mut plan.configuration);
                    } else if !line.trim().is_empty() {
                        plan.implementation_plan.push_str(line.trim_end());
                        plan.implementation_plan.push('\n');
                    }
                }
                Some(Part::Interdependency) => {
                    if let Some(c) = item_re().captures(line) {
                        inter.push(c[1].trim().to_string());
                    } else if !line.trim().is_empty() {
                        match inter.last_mut() {
                            Some(last) => {
                                last.push(' ');
                                last.push_str(line.trim());
                            }
                            None => inter.push(line.trim().to_string()),
                        }
                    }
                }
                None => {}
            }
        }
        for k in ModuleKind::PLANNED {
            if !plans.contains_key(&k) {
                return Err(BlueprintError::MissingModuleSection(k));
            }
        }
        if !seen_inter || inter.is_empty() {
            return Err(BlueprintError::MissingInterdependencies);
        }
        Ok(Self { module_plans: plans, interdependencies: inter, raw_text: text.to_string() })
    }

    /// Task description handed to a module's coder.
    pub fn task_description(&self, kind: ModuleKind) -> String {
        let Some(plan) = self.module_plans.get(&kind) else {
            return format!(
                "Write run.py that runs the FL simulation using the four modules.\n\nModule Interdependency:\n{}",
                self.interdependencies.iter().map(|s| format!("- {s}")).collect::<Vec<_>>().join("\n")
            );
        };
        let mut out = plan.implementation_plan.trim_end().to_string();
        if !plan.configuration.is_empty() {
            out.push_str("\n\nCONFIGURATION:");
            for (k, v) in &plan.configuration {
                out.push_str(&format!("\n- {k}: {v}"));
            }
        }
        out
    }
}
