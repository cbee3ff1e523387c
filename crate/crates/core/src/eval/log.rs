use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    FitAgg,
    EvalAgg,
    CentralEval,
}

impl Phase {
    pub fn is_aggregation(self) -> bool {
        matches!(self, Phase::FitAgg | Phase::EvalAgg)
    }
}

/// One line of the sandbox's events.jsonl channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuredEvent {
    pub round: u32,
    pub phase: Phase,
    #[serde(default)]
    pub loss: Option<f64>,
    #[serde(default)]
    pub accuracy: Option<f64>,
    pub num_results: u32,
}

impl StructuredEvent {
    /// Keys in fixed order, floats with at most 6 decimals.
    pub fn to_line(&self) -> String {
        let num = |v: Option<f64>| match v {
            Some(x) if x.is_finite() => {
                let s = format!("{x:.6}");
                let s = s.trim_end_matches('0');
                let s = s.strip_suffix('.').map(|p| format!("{p}.0")).unwrap_or_else(|| s.to_string());
                s
            }
            _ => "null".into(),
        };
        let phase = match self.phase {
            Phase::FitAgg => "fit_agg",
            Phase::EvalAgg => "eval_agg",
            Phase::CentralEval => "central_eval",
        };
        format!(
            "{{\"round\": {}, \"phase\": \"{phase}\", \"loss\": {}, \"accuracy\": {}, \"num_results\": {}}}",
            self.round,
            num(self.loss),
            num(self.accuracy),
            self.num_results
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedEvents {
    pub events: Vec<StructuredEvent>,
    /// 1-based line numbers that were not valid events.
    pub malformed_lines: Vec<usize>,
    /// The final line had no terminator (writer died mid-line); it is dropped.
    pub truncated_tail: bool,
}

pub fn parse_events(text: &str) -> ParsedEvents {
    let mut out = ParsedEvents::default();
    let complete = match text.rfind('\n') {
        Some(i) => {
            out.truncated_tail = i + 1 < text.len() && !text[i + 1..].trim().is_empty();
            &text[..i + 1]
        }
        None => {
            out.truncated_tail = !text.trim().is_empty();
            ""
        }
    };
    for (n, line) in complete.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<StructuredEvent>(line) {
            Ok(ev) if ev.accuracy.map_or(true, |a| (0.0..=1.0).contains(&a)) => out.events.push(ev),
            _ => out.malformed_lines.push(n + 1),
        }
    }
    out
}

/// L_i: everything one simulation produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationLog {
    pub run_handle: String,
    pub return_code: i32,
    pub stdout: String,
    pub stderr: String,
    pub events: Vec<StructuredEvent>,
    pub wall_time_ms: u64,
    #[serde(default)]
    pub timed_out: bool,
    #[serde(default)]
    pub malformed_event_lines: Vec<usize>,
}

impl SimulationLog {
    pub fn rounds_non_decreasing(&self) -> bool {
        self.events.windows(2).all(|w| w[0].round <= w[1].round)
    }

    /// Number of distinct rounds with a fit aggregation.
    pub fn completed_rounds(&self) -> usize {
        let mut rounds: Vec<u32> = self.events.iter().filter(|e| e.phase == Phase::FitAgg).map(|e| e.round).collect();
        rounds.sort_unstable();
        rounds.dedup();
        rounds.len()
    }

    pub fn losses(&self, phase: Phase) -> Vec<f64> {
        self.events.iter().filter(|e| e.phase == phase).filter_map(|e| e.loss).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_skips_torn_tail() {
        let text = "{\"round\": 1, \"phase\": \"fit_agg\", \"loss\": 0.5, \"accuracy\": 0.7, \"num_results\": 3}\n{\"round\": 2, \"ph";
        let p = parse_events(text);
        assert_eq!(p.events.len(), 1);
        assert!(p.truncated_tail);
        assert!(p.malformed_lines.is_empty());
    }

    #[test]
    fn malformed_and_out_of_range() {
        let text = "not json\n{\"round\": 1, \"phase\": \"fit_agg\", \"loss\": null, \"accuracy\": 1.5, \"num_results\": 3}\n{\"round\": 1, \"phase\": \"eval_agg\", \"num_results\": 0}\n";
        let p = parse_events(text);
        assert_eq!(p.malformed_lines, vec![1, 2]);
        assert_eq!(p.events[0].phase, Phase::EvalAgg);
        assert_eq!(p.events[0].loss, None);
    }

    #[test]
    fn line_format_round_trips() {
        let ev = StructuredEvent { round: 3, phase: Phase::CentralEval, loss: Some(0.1234567), accuracy: Some(0.5), num_results: 0 };
        let line = ev.to_line();
        assert_eq!(line, "{\"round\": 3, \"phase\": \"central_eval\", \"loss\": 0.123457, \"accuracy\": 0.5, \"num_results\": 0}");
        let back: StructuredEvent = serde_json::from_str(&line).unwrap();
        assert_eq!(back.round, 3);
        assert!((back.loss.unwrap() - 0.123457).abs() < 1e-12);
    }
}
