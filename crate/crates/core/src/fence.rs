//! Fenced code blocks and the debugger's `FILE:` block protocol.
//!
//! A fence opens with a line of at least three backticks (optionally followed
//! by an info string) and closes with a line holding only backticks, at least
//! as many as the opener. The block body is every byte between the opener's
//! newline and the newline before the closing fence.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::codebase::{ModuleKind, PatchSet};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FenceError {
    #[error("no code block")]
    NoCodeBlock,
    #[error("code block opened at line {0} is never closed")]
    Unterminated(usize),
    #[error("no FILE blocks")]
    NoFileBlocks,
    #[error("unknown file name {0}")]
    UnknownFileName(String),
    #[error("FILE: {0} is not followed by a code block")]
    MissingBlock(String),
    #[error("file {0} appears twice")]
    DuplicateFile(String),
    #[error("file {0} has an empty body")]
    EmptyBody(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeBlock {
    pub info: String,
    pub body: String,
    /// Zero-based line index of the opening fence.
    pub open_line: usize,
    /// Zero-based line index of the closing fence.
    pub close_line: usize,
}

fn opener(line: &str) -> Option<(usize, &str)> {
    let t = line.trim_start();
    let ticks = t.bytes().take_while(|&b| b == b'`').count();
    if ticks < 3 {
        return None;
    }
    let info = &t[ticks..];
    if info.contains('`') {
        return None;
    }
    Some((ticks, info.trim()))
}

fn closes(line: &str, ticks: usize) -> bool {
    let t = line.trim();
    t.len() >= ticks && t.bytes().all(|b| b == b'`')
}

/// Split text into lines, keeping the byte offset where each one starts.
fn lines_with_offsets(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, b) in text.bytes().enumerate() {
        if b == b'\n' {
            out.push((start, &text[start..i]));
            start = i + 1;
        }
    }
    out.push((start, &text[start..]));
    out
}

/// Read the block whose opener sits at `lines[at]`.
fn read_block(text: &str, lines: &[(usize, &str)], at: usize) -> Result<CodeBlock, FenceError> {
    let (ticks, info) = opener(lines[at].1).ok_or(FenceError::NoCodeBlock)?;
    let body_start = lines.get(at + 1).map(|l| l.0).unwrap_or(text.len());
    for (j, &(off, line)) in lines.iter().enumerate().skip(at + 1) {
        if closes(line, ticks) {
            let body_end = if j == at + 1 { body_start } else { off - 1 };
            return Ok(CodeBlock {
                info: info.to_string(),
                body: text[body_start..body_end.max(body_start)].to_string(),
                open_line: at,
                close_line: j,
            });
        }
    }
    Err(FenceError::Unterminated(at + 1))
}

pub fn code_blocks(text: &str) -> Result<Vec<CodeBlock>, FenceError> {
    let lines = lines_with_offsets(text);
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if opener(lines[i].1).is_some() {
            let block = read_block(text, &lines, i)?;
            i = block.close_line + 1;
            out.push(block);
        } else {
            i += 1;
        }
    }
    Ok(out)
}

/// Body of the first fenced block plus the total number of blocks seen.
pub fn extract_code_block(text: &str) -> Result<(String, usize), FenceError> {
    let blocks = code_blocks(text)?;
    let n = blocks.len();
    let first = blocks.into_iter().next().ok_or(FenceError::NoCodeBlock)?;
    if n > 1 {
        tracing::debug!(blocks = n, "multiple code blocks, using the first");
    }
    Ok((first.body, n))
}

fn file_header(line: &str) -> Option<&str> {
    let t = line.trim().trim_matches('*').trim();
    let rest = t.strip_prefix("FILE:")?;
    Some(rest.trim().trim_matches(|c| c == '`' || c == '*').trim())
}

/// Parse `FILE: name` headers each followed by a fenced block.
pub fn parse_file_blocks(text: &str) -> Result<PatchSet, FenceError> {
    let lines = lines_with_offsets(text);
    let mut replacements = BTreeMap::new();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i].1;
        if opener(line).is_some() {
            i = read_block(text, &lines, i)?.close_line + 1;
            continue;
        }
        let Some(name) = file_header(line) else {
            i += 1;
            continue;
        };
        if ModuleKind::from_file_name(name).is_none() {
            return Err(FenceError::UnknownFileName(name.to_string()));
        }
        let mut j = i + 1;
        while j < lines.len() && lines[j].1.trim().is_empty() {
            j += 1;
        }
        if j >= lines.len() || opener(lines[j].1).is_none() {
            return Err(FenceError::MissingBlock(name.to_string()));
        }
        let block = read_block(text, &lines, j)?;
        if block.body.trim().is_empty() {
            return Err(FenceError::EmptyBody(name.to_string()));
        }
        if replacements.insert(name.to_string(), block.body).is_some() {
            return Err(FenceError::DuplicateFile(name.to_string()));
        }
        i = block.close_line + 1;
    }
    if replacements.is_empty() {
        return Err(FenceError::NoFileBlocks);
    }
    Ok(PatchSet { replacements })
}

fn longest_tick_run(s: &str) -> usize {
    let mut best = 0;
    let mut cur = 0;
    for b in s.bytes() {
        if b == b'`' {
            cur += 1;
            best = best.max(cur);
        } else {
            cur = 0;
        }
    }
    best
}

/// Wrap `body` in a fence long enough that no line inside can close it.
pub fn fence(body: &str, info: &str) -> String {
    let ticks = "`".repeat((longest_tick_run(body) + 1).max(3));
    format!("{ticks}{info}\n{body}\n{ticks}\n")
}

pub fn serialize_file_blocks(patch: &PatchSet) -> String {
    let mut out = String::new();
    for (name, body) in &patch.replacements {
        out.push_str("FILE: ");
        out.push_str(name);
        out.push('\n');
        out.push_str(&fence(body, "python"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_fence_lines_exactly() {
        assert_eq!(extract_code_block("```python\nx=1\n```").unwrap(), ("x=1".to_string(), 1));
        assert_eq!(extract_code_block("```\n```").unwrap().0, "");
        assert_eq!(extract_code_block("```\n\n```").unwrap().0, "");
        assert_eq!(extract_code_block("```\na\n\n```").unwrap().0, "a\n");
    }

    #[test]
    fn prose_has_no_block() {
        assert_eq!(extract_code_block("just words"), Err(FenceError::NoCodeBlock));
        assert_eq!(extract_code_block("```python\nx=1\n"), Err(FenceError::Unterminated(1)));
    }

    #[test]
    fn first_of_two_blocks() {
        let t = "a\n```python\none\n```\nb\n```\ntwo\n```\n";
        assert_eq!(extract_code_block(t).unwrap(), ("one".to_string(), 2));
    }

    #[test]
    fn longer_closer_required() {
        let t = "````\n```\ninner\n```\n````";
        assert_eq!(extract_code_block(t).unwrap().0, "```\ninner\n```");
    }

    #[test]
    fn single_file_block() {
        let p = parse_file_blocks("FILE: task.py\n```python\nfixed\n```").unwrap();
        assert_eq!(p.replacements, BTreeMap::from([("task.py".into(), "fixed".into())]));
    }

    #[test]
    fn two_file_blocks_with_prose() {
        let t = "The bug is in two places.\n\nFILE: strategy.py\n```python\na = 1\n```\n\n**FILE: run.py**\n```python\nb = 2\n```\nDone.";
        let p = parse_file_blocks(t).unwrap();
        assert_eq!(p.file_names(), vec!["run.py", "strategy.py"]);
    }

    #[test]
    fn whitelist_enforced() {
        assert_eq!(
            parse_file_blocks("FILE: virus.py\n```python\nx\n```"),
            Err(FenceError::UnknownFileName("virus.py".into()))
        );
        assert_eq!(parse_file_blocks("nothing here"), Err(FenceError::NoFileBlocks));
        assert_eq!(
            parse_file_blocks("FILE: task.py\nno block"),
            Err(FenceError::MissingBlock("task.py".into()))
        );
    }

    #[test]
    fn file_header_inside_block_is_content() {
        let p = PatchSet {
            replacements: BTreeMap::from([(
                "task.py".to_string(),
                "FILE: virus.py\n```python\n```\n".to_string(),
            )]),
        };
        assert_eq!(parse_file_blocks(&serialize_file_blocks(&p)).unwrap(), p);
    }
}
