//! Per-trial grasp records and the newline-delimited metrics format: one
//! record per line followed by a summary object.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::GraspStatus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Click,
    Drag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub trial: u32,
    pub object_class: String,
    pub method: SelectionMethod,
    /// Seconds from the grasp selection to the grasp outcome.
    pub duration: f64,
    pub status: GraspStatus,
    /// Object position in the robot base frame when the robot sat down, as
    /// `[forward, right]` meters.
    pub final_position: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSummary {
    pub trials: usize,
    pub successes: usize,
    /// `None` when there are no trials.
    pub success_rate: Option<f64>,
}

impl MetricsSummary {
    pub fn of(records: &[MetricsRecord]) -> Self {
        let trials = records.len();
        let successes = records.iter().filter(|r| r.status == GraspStatus::Success).count();
        Self {
            trials,
            successes,
            success_rate: (trials > 0).then(|| successes as f64 / trials as f64),
        }
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("metrics file has no summary line")]
    MissingSummary,
    #[error("metrics summary does not match the records")]
    SummaryMismatch,
}

#[derive(Serialize, Deserialize)]
struct SummaryLine {
    summary: MetricsSummary,
}

pub fn to_ndjson(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    let summary = SummaryLine {
        summary: MetricsSummary::of(records),
    };
    out.push_str(&serde_json::to_string(&summary).expect("summary serializes"));
    out.push('\n');
    out
}

pub fn from_ndjson(text: &str) -> Result<(Vec<MetricsRecord>, MetricsSummary), MetricsError> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    let ((last_no, last), body) = lines.split_last().ok_or(MetricsError::MissingSummary)?;
    let summary: SummaryLine = serde_json::from_str(last).map_err(|source| MetricsError::Parse {
        line: last_no + 1,
        source,
    })?;
    let records = body
        .iter()
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| MetricsError::Parse { line: i + 1, source }))
        .collect::<Result<Vec<MetricsRecord>, _>>()?;
    if MetricsSummary::of(&records) != summary.summary {
        return Err(MetricsError::SummaryMismatch);
    }
    Ok((records, summary.summary))
}

/// Success rate per object class, in first-seen order.
pub fn rate_by_class(records: &[MetricsRecord]) -> Vec<(String, usize, usize)> {
    let mut out: Vec<(String, usize, usize)> = Vec::new();
    for r in records {
        let i = match out.iter().position(|(c, _, _)| *c == r.object_class) {
            Some(i) => i,
            None => {
                out.push((r.object_class.clone(), 0, 0));
                out.len() - 1
            }
        };
        out[i].1 += 1;
        if r.status == GraspStatus::Success {
            out[i].2 += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(trial: u32, status: GraspStatus) -> MetricsRecord {
        MetricsRecord {
            trial,
            object_class: "charger".into(),
            method: SelectionMethod::Click,
            duration: 3.25 + trial as f64 / 7.0,
            status,
            final_position: [0.255, 0.1 / 3.0],
        }
    }

    #[test]
    fn empty_summary_has_null_rate() {
        let text = to_ndjson(&[]);
        assert_eq!(text, "{\"summary\":{\"trials\":0,\"successes\":0,\"success_rate\":null}}\n");
        let (records, summary) = from_ndjson(&text).unwrap();
        assert!(records.is_empty());
        assert_eq!(summary.success_rate, None);
    }

    #[test]
    fn round_trip() {
        let rs: Vec<_> = (1..=4)
            .map(|i| record(i, if i % 2 == 0 { GraspStatus::FailSlip } else { GraspStatus::Success }))
            .collect();
        let text = to_ndjson(&rs);
        let (back, summary) = from_ndjson(&text).unwrap();
        assert_eq!(back, rs);
        assert_eq!(summary.success_rate, Some(0.5));
        assert_eq!(to_ndjson(&back), text);
    }

    #[test]
    fn tampered_summary_rejected() {
        let text = to_ndjson(&[record(1, GraspStatus::Success)]).replace("\"successes\":1", "\"successes\":0");
        assert!(matches!(from_ndjson(&text), Err(MetricsError::SummaryMismatch)));
    }
}
