//! Syntax checks for generated Python sources.
//!
//! [`GrammarChecker`] is a pure-Rust approximation of the Python grammar:
//! string and bracket balance, compound-statement headers ending in `:`,
//! and block indentation. [`PythonChecker`] asks a local `python3` to parse
//! the source and falls back to the grammar checker when none is present.

use std::io::Write;
use std::process::{Command, Stdio};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntaxDiagnostic {
    /// One-based.
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for SyntaxDiagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "syntax error at line {}: {}", self.line, self.message)
    }
}

pub trait SyntaxChecker: Send + Sync {
    fn check(&self, source: &str) -> Result<(), SyntaxDiagnostic>;
}

const COMPOUND: &[&str] = &[
    "def", "class", "if", "elif", "else", "for", "while", "try", "except", "finally", "with", "async",
];

#[derive(Debug, Default)]
struct LogicalLine {
    line: usize,
    indent: usize,
    first_word: String,
    ends_with_colon: bool,
    colon_at_depth0: bool,
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GrammarChecker;

fn err(line: usize, message: impl Into<String>) -> SyntaxDiagnostic {
    SyntaxDiagnostic { line, message: message.into() }
}

fn logical_lines(src: &str) -> Result<Vec<LogicalLine>, SyntaxDiagnostic> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut stack: Vec<(char, usize)> = Vec::new();
    let mut line = 1;
    let mut i = 0;
    let mut cur: Option<LogicalLine> = None;
    let mut at_line_start = true;
    let mut col_indent = 0;
    let mut last_sig: Option<char> = None;
    let mut continued = false;

    while i < chars.len() {
        let c = chars[i];
        if at_line_start {
            if c == ' ' {
                col_indent += 1;
                i += 1;
                continue;
            }
            if c == '\t' {
                col_indent = (col_indent / 8 + 1) * 8;
                i += 1;
                continue;
            }
            at_line_start = false;
        }
        match c {
            '\n' => {
                if stack.is_empty() && !continued {
                    if let Some(mut l) = cur.take() {
                        l.ends_with_colon = last_sig == Some(':');
                        out.push(l);
                    }
                    last_sig = None;
                }
                continued = false;
                line += 1;
                at_line_start = cur.is_none();
                col_indent = 0;
                i += 1;
                continue;
            }
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
                continue;
            }
            '\\' if chars.get(i + 1) == Some(&'\n') => {
                continued = true;
                i += 1;
                continue;
            }
            ' ' | '\t' | '\r' | '\x0c' => {
                i += 1;
                continue;
            }
            _ => {}
        }
        let l = cur.get_or_insert_with(|| LogicalLine { line, indent: col_indent, ..Default::default() });
        if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            let is_prefix = word.len() <= 3
                && word.chars().all(|ch| "rRbBuUfF".contains(ch))
                && matches!(chars.get(i), Some('\'') | Some('"'));
            if l.first_word.is_empty() && !is_prefix && last_sig.is_none() {
                l.first_word = word;
            }
            last_sig = Some('a');
            continue;
        }
        if c == '\'' || c == '"' {
            let triple = chars.get(i + 1) == Some(&c) && chars.get(i + 2) == Some(&c);
            let start_line = line;
            i += if triple { 3 } else { 1 };
            loop {
                let Some(&d) = chars.get(i) else {
                    return Err(err(start_line, "unterminated string literal"));
                };
                if d == '\\' {
                    if chars.get(i + 1) == Some(&'\n') {
                        line += 1;
                    }
                    i += 2;
                    continue;
                }
                if d == '\n' {
                    if !triple {
                        return Err(err(start_line, "unterminated string literal"));
                    }
                    line += 1;
                }
                if d == c && (!triple || (chars.get(i + 1) == Some(&c) && chars.get(i + 2) == Some(&c))) {
                    i += if triple { 3 } else { 1 };
                    break;
                }
                i += 1;
            }
            last_sig = Some('s');
            continue;
        }
        match c {
            '(' | '[' | '{' => stack.push((c, line)),
            ')' | ']' | '}' => {
                let want = match c {
                    ')' => '(',
                    ']' => '[',
                    _ => '{',
                };
                match stack.pop() {
                    Some((open, _)) if open == want => {}
                    Some((open, at)) => {
                        return Err(err(line, format!("closing '{c}' does not match '{open}' opened at line {at}")))
                    }
                    None => return Err(err(line, format!("unmatched '{c}'"))),
                }
            }
            ':' if stack.is_empty() => l.colon_at_depth0 = true,
            _ => {}
        }
        last_sig = Some(c);
        i += 1;
    }
    if let Some(&(open, at)) = stack.last() {
        return Err(err(at, format!("'{open}' was never closed")));
    }
    if let Some(mut l) = cur.take() {
        l.ends_with_colon = last_sig == Some(':');
        out.push(l);
    }
    Ok(out)
}

impl SyntaxChecker for GrammarChecker {
    fn check(&self, source: &str) -> Result<(), SyntaxDiagnostic> {
        let lines = logical_lines(source)?;
        let mut indents = vec![0usize];
        let mut expect_block = false;
        let mut last_line = 0;
        for l in &lines {
            let top = *indents.last().unwrap();
            if expect_block {
                if l.indent <= top {
                    return Err(err(l.line, "expected an indented block"));
                }
                indents.push(l.indent);
            } else if l.indent > top {
                return Err(err(l.line, "unexpected indent"));
            } else if l.indent < top {
                while *indents.last().unwrap() > l.indent {
                    indents.pop();
                }
                if *indents.last().unwrap() != l.indent {
                    return Err(err(l.line, "unindent does not match any outer indentation level"));
                }
            }
            if COMPOUND.contains(&l.first_word.as_str()) && !l.colon_at_depth0 {
                return Err(err(l.line, format!("expected ':' after {}", l.first_word)));
            }
            expect_block = l.ends_with_colon;
            last_line = l.line;
        }
        if expect_block {
            return Err(err(last_line, "expected an indented block"));
        }
        Ok(())
    }
}

const PY_CHECK: &str = "import ast,sys\nsrc=sys.stdin.read()\ntry:\n    ast.parse(src)\nexcept SyntaxError as e:\n    print(e.lineno or 1)\n    print(e.msg)\n    sys.exit(3)\n";

/// Parses with the local interpreter's `ast` module.
#[derive(Debug, Clone)]
pub struct PythonChecker {
    pub interpreter: String,
}

impl Default for PythonChecker {
    fn default() -> Self {
        Self { interpreter: "python3".into() }
    }
}

impl PythonChecker {
    pub fn available(&self) -> bool {
        Command::new(&self.interpreter)
            .arg("--version")
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map(|s| s.success())
            .unwrap_or(false)
    }
}

impl SyntaxChecker for PythonChecker {
    fn check(&self, source: &str) -> Result<(), SyntaxDiagnostic> {
        let child = Command::new(&self.interpreter)
            .args(["-c", PY_CHECK])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn();
        let Ok(mut child) = child else {
            return GrammarChecker.check(source);
        };
        if let Some(mut stdin) = child.stdin.take() {
            let _ = stdin.write_all(source.as_bytes());
        }
        let Ok(out) = child.wait_with_output() else {
            return GrammarChecker.check(source);
        };
        match out.status.code() {
            Some(0) => Ok(()),
            Some(3) => {
                let text = String::from_utf8_lossy(&out.stdout);
                let mut lines = text.lines();
                let line = lines.next().and_then(|l| l.trim().parse().ok()).unwrap_or(1);
                Err(err(line, lines.next().unwrap_or("invalid syntax").to_string()))
            }
            _ => GrammarChecker.check(source),
        }
    }
}

/// The interpreter-backed checker when `python3` runs, the grammar checker
/// otherwise. `FEDFORGE_SYNTAX=grammar` forces the grammar checker.
pub fn default_checker() -> Box<dyn SyntaxChecker> {
    let forced = std::env::var("FEDFORGE_SYNTAX").map(|v| v == "grammar").unwrap_or(false);
    let py = PythonChecker::default();
    if !forced && py.available() {
        Box::new(py)
    } else {
        Box::new(GrammarChecker)
    }
}
