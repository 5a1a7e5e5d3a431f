//! Line-delimited trace files: one JSON object per step, then one outcome line.

use serde::{Deserialize, Serialize};

use super::episode::{EpisodeOutcome, EpisodeResult, EpisodeTrace};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub t: usize,
    /// `[x, y, heading, speed]`
    pub ego: [f64; 4],
    pub npcs: Vec<[f64; 4]>,
    pub a_ads: f64,
    pub y_safe_hat: Option<f64>,
    pub repair_index: Option<usize>,
    pub a_final: f64,
    pub reward: Option<f64>,
    #[serde(default)]
    pub clamped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeRecord {
    pub outcome: EpisodeResult,
    pub y_s: u8,
    #[serde(rename = "T")]
    pub final_step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceFile {
    pub steps: Vec<StepRecord>,
    pub outcome: EpisodeOutcome,
}

pub fn to_records(trace: &EpisodeTrace) -> TraceFile {
    let steps = trace
        .steps
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let e = &s.obs.ego;
            StepRecord {
                t,
                ego: [e.x, e.y, e.heading, e.speed],
                npcs: s.npcs.iter().map(|n| [n.x, n.y, n.heading, n.speed]).collect(),
                a_ads: s.a_ads,
                y_safe_hat: s.decision.and_then(|d| d.y_safe_hat),
                repair_index: s.decision.map(|d| d.repair_index),
                a_final: s.a_final,
                reward: s.reward,
                clamped: s.clamped,
            }
        })
        .collect();
    TraceFile {
        steps,
        outcome: trace.outcome,
    }
}

pub fn write_trace(trace: &EpisodeTrace) -> String {
    let file = to_records(trace);
    let mut out = String::new();
    for s in &file.steps {
        out.push_str(&serde_json::to_string(s).expect("step record serializes"));
        out.push('\n');
    }
    let o = OutcomeRecord {
        outcome: file.outcome.result,
        y_s: file.outcome.y_s(),
        final_step: file.outcome.final_step,
    };
    out.push_str(&serde_json::to_string(&o).expect("outcome serializes"));
    out.push('\n');
    out
}

pub fn parse_trace(text: &str) -> Result<TraceFile> {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let (last, body) = lines
        .split_last()
        .ok_or_else(|| Error::format("trace", "empty trace"))?;
    let o: OutcomeRecord = serde_json::from_str(last)
        .map_err(|e| Error::format("trace", format!("outcome line: {e}")))?;
    let outcome = EpisodeOutcome {
        result: o.outcome,
        final_step: o.final_step,
    };
    if o.y_s != outcome.y_s() {
        return Err(Error::format("trace", "y_s disagrees with outcome"));
    }
    let mut steps = Vec::with_capacity(body.len());
    for (i, line) in body.iter().enumerate() {
        let s: StepRecord = serde_json::from_str(line)
            .map_err(|e| Error::format("trace", format!("line {}: {e}", i + 1)))?;
        if s.t != i {
            return Err(Error::format("trace", format!("line {} has t = {}", i + 1, s.t)));
        }
        steps.push(s);
    }
    if steps.len() != outcome.final_step {
        return Err(Error::format(
            "trace",
            format!("{} steps but T = {}", steps.len(), outcome.final_step),
        ));
    }
    Ok(TraceFile { steps, outcome })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_files() {
        assert!(parse_trace("").is_err());
        assert!(parse_trace("{\"outcome\":\"collision\",\"y_s\":0,\"T\":0}\n").is_err());
        let ok = "{\"outcome\":\"success\",\"y_s\":0,\"T\":0}\n";
        assert_eq!(parse_trace(ok).unwrap().steps.len(), 0);
        let short = "{\"outcome\":\"success\",\"y_s\":0,\"T\":3}\n";
        assert!(parse_trace(short).is_err());
    }
}
