//! Required-symbol table per module kind, loaded from a data asset.

use std::collections::BTreeMap;

use regex::Regex;
use serde::Deserialize;

use crate::codebase::ModuleKind;

const SHIPPED: &str = include_str!("../../assets/required_symbols.toml");

#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleSymbols {
    #[serde(default)]
    pub definitions: Vec<String>,
    #[serde(default)]
    pub imports: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequiredSymbols {
    by_kind: BTreeMap<ModuleKind, ModuleSymbols>,
}

impl RequiredSymbols {
    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        let raw: BTreeMap<String, ModuleSymbols> = toml::from_str(text)?;
        let by_kind = raw
            .into_iter()
            .filter_map(|(k, v)| ModuleKind::parse_label(&k).map(|kind| (kind, v)))
            .collect();
        Ok(Self { by_kind })
    }

    pub fn shipped() -> Self {
        Self::parse(SHIPPED).expect("bundled symbol table parses")
    }

    pub fn for_kind(&self, kind: ModuleKind) -> ModuleSymbols {
        self.by_kind.get(&kind).cloned().unwrap_or_default()
    }

    /// Required names that `source` does not define or import, in table order.
    pub fn missing(&self, kind: ModuleKind, source: &str) -> Vec<String> {
        let req = self.for_kind(kind);
        let mut out = Vec::new();
        for name in &req.definitions {
            let n = regex::escape(name);
            let re = Regex::new(&format!(
                r"(?m)^[ \t]*(?:async[ \t]+)?def[ \t]+{n}[ \t]*\(|^[ \t]*class[ \t]+{n}\b|^{n}[ \t]*(?::[^=\n]*)?=[^=]"
            ))
            .expect("symbol regex");
            if !re.is_match(source) {
                out.push(name.clone());
            }
        }
        for module in &req.imports {
            let m = regex::escape(module);
            let re = Regex::new(&format!(r"(?m)^[ \t]*(?:from[ \t]+{m}[ \t]+import\b|import[ \t]+{m}\b)"))
                .expect("import regex");
            if !re.is_match(source) {
                out.push(format!("import of {module}"));
            }
        }
        out
    }
}
