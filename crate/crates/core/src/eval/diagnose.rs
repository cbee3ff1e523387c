use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::log::{Phase, SimulationLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L2Rules {
    pub min_metric_delta: f64,
    pub min_results: u32,
    pub min_completed_rounds: u32,
}

/// H: literal error signatures plus semantic thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisRuleset {
    pub l1_signatures: Vec<String>,
    pub l2_rules: L2Rules,
}

pub const DEFAULT_SIGNATURES: [&str; 4] = ["Traceback", "Error", "Exception", "ClientAppException"];
pub const DEFAULT_MIN_METRIC_DELTA: f64 = 1e-6;
pub const DEFAULT_MIN_RESULTS: u32 = 1;

impl DiagnosisRuleset {
    pub fn for_rounds(n_rounds: u32) -> Self {
        Self {
            l1_signatures: DEFAULT_SIGNATURES.iter().map(|s| s.to_string()).collect(),
            l2_rules: L2Rules {
                min_metric_delta: DEFAULT_MIN_METRIC_DELTA,
                min_results: DEFAULT_MIN_RESULTS,
                min_completed_rounds: n_rounds.max(1),
            },
        }
    }

    pub fn is_valid(&self) -> bool {
        !self.l1_signatures.is_empty()
            && self.l2_rules.min_results > 0
            && self.l2_rules.min_completed_rounds > 0
            && self.l2_rules.min_metric_delta >= 0.0
    }
}

impl Default for DiagnosisRuleset {
    fn default() -> Self {
        Self::for_rounds(super::sandbox::DEFAULT_N_ROUNDS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DiagnosisStatus {
    Success,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    L1,
    L2,
    #[serde(rename = "none")]
    None,
}

/// Stable tags that lead every FAIL reason.
pub mod reasons {
    pub const TIMEOUT: &str = "timeout";
    pub const ERROR_SIGNATURE: &str = "error-signature";
    pub const NONZERO_EXIT: &str = "nonzero-exit";
    pub const INCOMPLETE_ROUNDS: &str = "incomplete-rounds";
    pub const ZERO_RESULTS: &str = "zero-results";
    pub const STAGNANT_METRICS: &str = "stagnant-metrics";
}

/// (S_i, E_i)
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub status: DiagnosisStatus,
    pub layer: Layer,
    pub reason: String,
    pub error_excerpt: String,
}

impl DiagnosisReport {
    pub fn success(reason: impl Into<String>) -> Self {
        Self { status: DiagnosisStatus::Success, layer: Layer::None, reason: reason.into(), error_excerpt: String::new() }
    }

    pub fn fail(layer: Layer, reason: impl Into<String>, excerpt: impl Into<String>) -> Self {
        debug_assert!(layer != Layer::None);
        Self { status: DiagnosisStatus::Fail, layer, reason: reason.into(), error_excerpt: excerpt.into() }
    }

    pub fn is_success(&self) -> bool {
        self.status == DiagnosisStatus::Success
    }

    /// Leading tag of the reason, e.g. `zero-results`.
    pub fn reason_code(&self) -> &str {
        self.reason.split(':').next().unwrap_or("").trim()
    }

    /// Text handed to the debugger as error feedback.
    pub fn feedback(&self) -> String {
        let layer = match self.layer {
            Layer::L1 => "L1 runtime integrity",
            Layer::L2 => "L2 semantic correctness",
            Layer::None => "none",
        };
        if self.error_excerpt.is_empty() {
            format!("Diagnosis: FAIL ({layer})\nReason: {}", self.reason)
        } else {
            format!("Diagnosis: FAIL ({layer})\nReason: {}\nLog excerpt:\n{}", self.reason, self.error_excerpt)
        }
    }

    pub fn invariant_holds(&self) -> bool {
        (self.status == DiagnosisStatus::Success) == (self.layer == Layer::None)
            && (self.status == DiagnosisStatus::Success || !self.reason.trim().is_empty())
    }
}

const CONTEXT_LINES: usize = 2;
const MAX_EXCERPT_LINES: usize = 40;
const TAIL_LINES: usize = 20;

fn error_word() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\bError\b").expect("static regex"))
}

/// Lines the sandbox itself prefixes when framing streams.
fn is_framing(line: &str) -> bool {
    let t = line.trim_start();
    t.starts_with("stdout:") || t.starts_with("stderr:")
}

fn matches_signature(sig: &str, line: &str) -> bool {
    if sig == "Error" {
        error_word().is_match(line)
    } else {
        line.contains(sig)
    }
}

struct Hit<'a> {
    stream: &'static str,
    lines: Vec<&'a str>,
    matched: Vec<usize>,
    first_signature: &'a str,
}

fn scan<'a>(stream: &'static str, text: &'a str, sigs: &'a [String]) -> Option<Hit<'a>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut matched = Vec::new();
    let mut first = None;
    for (i, line) in lines.iter().enumerate() {
        if is_framing(line) {
            continue;
        }
        if let Some(sig) = sigs.iter().find(|s| matches_signature(s, line)) {
            first.get_or_insert(sig.as_str());
            matched.push(i);
        }
    }
    first.map(|first_signature| Hit { stream, lines, matched, first_signature })
}

fn excerpt(hit: &Hit<'_>) -> String {
    let mut keep = vec![false; hit.lines.len()];
    for &m in &hit.matched {
        let lo = m.saturating_sub(CONTEXT_LINES);
        let hi = (m + CONTEXT_LINES).min(hit.lines.len() - 1);
        keep[lo..=hi].iter_mut().for_each(|k| *k = true);
    }
    let mut out = vec![format!("[{}]", hit.stream)];
    let mut prev: Option<usize> = None;
    for (i, _) in keep.iter().enumerate().filter(|(_, k)| **k) {
        if prev.is_some_and(|p| p + 1 != i) {
            out.push("...".into());
        }
        out.push(hit.lines[i].to_string());
        prev = Some(i);
        if out.len() >= MAX_EXCERPT_LINES {
            out.push("...".into());
            break;
        }
    }
    out.join("\n")
}

fn tail(stream: &str, text: &str) -> String {
    let lines: Vec<&str> = text.lines().collect();
    let start = lines.len().saturating_sub(TAIL_LINES);
    format!("[{stream}]\n{}", lines[start..].join("\n"))
}

fn event_lines<'a>(events: impl Iterator<Item = &'a super::log::StructuredEvent>) -> String {
    events.map(|e| e.to_line()).collect::<Vec<_>>().join("\n")
}

/// f_eval: L1 runtime integrity first, then L2 semantic rules. Pure in (log, rules).
pub fn diagnose(log: &SimulationLog, rules: &DiagnosisRuleset) -> DiagnosisReport {
    if log.timed_out {
        return DiagnosisReport::fail(
            Layer::L1,
            format!("{}: wall-clock limit exceeded after {} ms", reasons::TIMEOUT, log.wall_time_ms),
            tail("stderr", &log.stderr),
        );
    }
    let hits: Vec<Hit<'_>> = [("stderr", &log.stderr), ("stdout", &log.stdout)]
        .into_iter()
        .filter_map(|(name, text)| scan(name, text, &rules.l1_signatures))
        .collect();
    if let Some(first) = hits.first() {
        let text = hits.iter().map(excerpt).collect::<Vec<_>>().join("\n");
        return DiagnosisReport::fail(
            Layer::L1,
            format!(
                "{}: `{}` found in {} (exit code {})",
                reasons::ERROR_SIGNATURE,
                first.first_signature,
                first.stream,
                log.return_code
            ),
            text,
        );
    }
    if log.return_code != 0 {
        let stream = if log.stderr.trim().is_empty() { ("stdout", &log.stdout) } else { ("stderr", &log.stderr) };
        return DiagnosisReport::fail(
            Layer::L1,
            format!("{}: process exited with code {}", reasons::NONZERO_EXIT, log.return_code),
            tail(stream.0, stream.1),
        );
    }

    let l2 = &rules.l2_rules;
    let completed = log.completed_rounds();
    if completed < l2.min_completed_rounds as usize {
        return DiagnosisReport::fail(
            Layer::L2,
            format!(
                "{}: {completed} of {} federated rounds completed",
                reasons::INCOMPLETE_ROUNDS,
                l2.min_completed_rounds
            ),
            event_lines(log.events.iter()),
        );
    }
    let starved: Vec<_> =
        log.events.iter().filter(|e| e.phase.is_aggregation() && e.num_results < l2.min_results).collect();
    if let Some(first) = starved.first() {
        let phase = if first.phase == Phase::FitAgg { "aggregate_fit" } else { "aggregate_evaluate" };
        return DiagnosisReport::fail(
            Layer::L2,
            format!("{}: {phase} received {} results in round {}", reasons::ZERO_RESULTS, first.num_results, first.round),
            event_lines(starved.into_iter()),
        );
    }
    if let Some((phase, delta)) = metric_spread(log) {
        if delta < l2.min_metric_delta {
            return DiagnosisReport::fail(
                Layer::L2,
                format!("{}: {phase} loss varied by {delta:e} across rounds", reasons::STAGNANT_METRICS),
                event_lines(log.events.iter().filter(|e| e.loss.is_some())),
            );
        }
    }
    DiagnosisReport::success(format!("{completed} rounds completed with changing metrics"))
}

/// Largest pairwise loss difference; central evaluation preferred, then the
/// aggregated phases. None when no phase has two losses.
pub fn metric_spread(log: &SimulationLog) -> Option<(&'static str, f64)> {
    [(Phase::CentralEval, "central_eval"), (Phase::EvalAgg, "eval_agg"), (Phase::FitAgg, "fit_agg")]
        .into_iter()
        .find_map(|(phase, name)| {
            let losses = log.losses(phase);
            (losses.len() >= 2).then(|| {
                let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
                (name, max - min)
            })
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::log::StructuredEvent;

    fn clean(losses: &[f64], results: u32) -> SimulationLog {
        let mut events = Vec::new();
        for (i, l) in losses.iter().enumerate() {
            let r = i as u32 + 1;
            events.push(StructuredEvent { round: r, phase: Phase::FitAgg, loss: Some(*l), accuracy: Some(0.5), num_results: results });
            events.push(StructuredEvent { round: r, phase: Phase::CentralEval, loss: Some(*l), accuracy: Some(0.5), num_results: 0 });
        }
        SimulationLog {
            run_handle: "t".into(),
            return_code: 0,
            stdout: "round 1 done\n".into(),
            stderr: String::new(),
            events,
            wall_time_ms: 10,
            timed_out: false,
            malformed_event_lines: vec![],
        }
    }

    #[test]
    fn clean_run_succeeds() {
        let r = diagnose(&clean(&[2.1, 1.7, 1.4, 1.2, 1.1], 15), &DiagnosisRuleset::default());
        assert!(r.is_success());
        assert!(r.invariant_holds());
    }

    #[test]
    fn client_app_exception_is_l1() {
        let mut log = clean(&[2.1, 1.7, 1.4, 1.2, 1.1], 15);
        log.stderr = "INFO starting\nClientAppException: slice indices must be integers\n".into();
        let r = diagnose(&log, &DiagnosisRuleset::default());
        assert_eq!((r.status, r.layer), (DiagnosisStatus::Fail, Layer::L1));
        assert!(r.error_excerpt.contains("ClientAppException: slice indices must be integers"));
        assert_eq!(r.reason_code(), reasons::ERROR_SIGNATURE);
    }

    #[test]
    fn stagnant_metric_is_l2() {
        let r = diagnose(&clean(&[0.7; 5], 15), &DiagnosisRuleset::default());
        assert_eq!(r.layer, Layer::L2);
        assert_eq!(r.reason_code(), reasons::STAGNANT_METRICS);
    }

    #[test]
    fn zero_results_is_l2() {
        let mut log = clean(&[2.1, 1.7, 1.4, 1.2, 1.1], 15);
        log.events.push(StructuredEvent { round: 5, phase: Phase::EvalAgg, loss: None, accuracy: None, num_results: 0 });
        let r = diagnose(&log, &DiagnosisRuleset::default());
        assert_eq!(r.layer, Layer::L2);
        assert_eq!(r.reason_code(), reasons::ZERO_RESULTS);
        assert!(r.reason.contains("aggregate_evaluate received 0 results"));
    }

    #[test]
    fn error_word_boundary_and_framing() {
        let rules = DiagnosisRuleset::default();
        let mut log = clean(&[2.1, 1.7, 1.4, 1.2, 1.1], 15);
        log.stdout = "stderr: Error stream attached\nErrorRate=0.1\nmin_error 0.2\n".into();
        assert!(diagnose(&log, &rules).is_success());
        log.stdout.push_str("Error loading data\n");
        assert_eq!(diagnose(&log, &rules).layer, Layer::L1);
    }

    #[test]
    fn timeout_and_nonzero_exit() {
        let rules = DiagnosisRuleset::default();
        let mut log = clean(&[2.1, 1.7], 15);
        log.timed_out = true;
        log.return_code = 9;
        assert_eq!(diagnose(&log, &rules).reason_code(), reasons::TIMEOUT);
        log.timed_out = false;
        let r = diagnose(&log, &rules);
        assert_eq!((r.layer, r.reason_code()), (Layer::L1, reasons::NONZERO_EXIT));
    }

    #[test]
    fn incomplete_rounds() {
        let r = diagnose(&clean(&[2.0, 1.0, 0.5], 3), &DiagnosisRuleset::for_rounds(5));
        assert_eq!(r.reason_code(), reasons::INCOMPLETE_ROUNDS);
        assert!(diagnose(&clean(&[2.0, 1.0, 0.5], 3), &DiagnosisRuleset::for_rounds(3)).is_success());
    }

    #[test]
    fn excerpt_keeps_context() {
        let mut log = clean(&[2.1, 1.7, 1.4, 1.2, 1.1], 15);
        log.return_code = 1;
        log.stderr = (0..30).map(|i| format!("line {i}")).collect::<Vec<_>>().join("\n")
            + "\nTraceback (most recent call last):\n  File \"run.py\", line 3\nValueError: bad\n";
        let r = diagnose(&log, &DiagnosisRuleset::default());
        assert!(r.error_excerpt.contains("line 28"));
        assert!(!r.error_excerpt.contains("line 20"));
        assert!(r.error_excerpt.contains("ValueError: bad"));
    }
}
