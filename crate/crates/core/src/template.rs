//! Named-placeholder substitution for prompt templates.
//!
//! Placeholders are `{name}` with `name` made of lowercase ASCII letters,
//! digits and underscores. `{{` and `}}` render as literal braces. Any other
//! brace is taken literally so that JSON-ish snippets in templates need no
//! escaping unless they look like a placeholder.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unbound placeholder `{{{0}}}`")]
    Unbound(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece<'a> {
    Text(&'a str),
    Brace(char),
    Slot(&'a str),
}

fn pieces(src: &str) -> Vec<Piece<'_>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if (b == b'{' || b == b'}') && bytes.get(i + 1) == Some(&b) {
            out.push(Piece::Text(&src[start..i]));
            out.push(Piece::Brace(b as char));
            i += 2;
            start = i;
            continue;
        }
        if b == b'{' {
            let name_len = bytes[i + 1..]
                .iter()
                .take_while(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || **c == b'_')
                .count();
            if name_len > 0 && bytes.get(i + 1 + name_len) == Some(&b'}') {
                out.push(Piece::Text(&src[start..i]));
                out.push(Piece::Slot(&src[i + 1..i + 1 + name_len]));
                i += name_len + 2;
                start = i;
                continue;
            }
        }
        i += 1;
    }
    out.push(Piece::Text(&src[start..]));
    out
}

/// Names of all placeholders in `src`, sorted.
pub fn placeholders(src: &str) -> BTreeSet<String> {
    pieces(src)
        .into_iter()
        .filter_map(|p| match p {
            Piece::Slot(s) => Some(s.to_string()),
            _ => None,
        })
        .collect()
}

/// Substitute every placeholder. Extra bindings are ignored.
pub fn render(src: &str, vars: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(src.len());
    for piece in pieces(src) {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Brace(c) => out.push(c),
            Piece::Slot(name) => match vars.get(name) {
                Some(v) => out.push_str(v),
                None => return Err(TemplateError::Unbound(name.to_string())),
            },
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&'static str, &str)]) -> BTreeMap<&'static str, String> {
        pairs.iter().map(|(k, v)| (*k, v.to_string())).collect()
    }

    #[test]
    fn substitutes_and_unescapes() {
        let out = render(
            "Model: {model} {{\"query\": 1}} {Not} {}",
            &vars(&[("model", "CNN")]),
        )
        .unwrap();
        assert_eq!(out, "Model: CNN {\"query\": 1} {Not} {}");
    }

    #[test]
    fn unbound_is_named() {
        let err = render("{a} {b}", &vars(&[("a", "x")])).unwrap_err();
        assert_eq!(err, TemplateError::Unbound("b".into()));
    }

    #[test]
    fn lists_placeholders() {
        let names = placeholders("{x} {{y}} {z_1} {x}");
        assert_eq!(names.into_iter().collect::<Vec<_>>(), vec!["x", "z_1"]);
    }
}
