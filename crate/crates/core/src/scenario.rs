//! Line-delimited scenario files.
//!
//! ```text
//! {"type":"anchor","device_rel_s":0.0,"abs_ms":1000000}
//! {"type":"frame","t_rel_s":0.2,"labels":["yawning"],"summary":"driver yawns"}
//! {"type":"query","t_rel_s":3.0,"text":"What is the driver doing?"}
//! ```
//!
//! Frames without `feat` get the hashed text embedding of their summary
//! (zero vector when there is no summary).

use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;

use crate::backend::embed_bag;
use crate::stream::{AnchorClock, FrameRecord, StreamError, TimeAnchor};

#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}: {message}")]
pub struct ScenarioError {
    pub line: usize,
    pub message: String,
}

impl ScenarioError {
    fn new(line: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct FrameLine {
    pub t_rel_s: f64,
    #[serde(default)]
    pub feat: Option<Vec<f64>>,
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default)]
    pub summary: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct QueryLine {
    pub t_rel_s: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioRecord {
    Anchor(TimeAnchor),
    Frame(FrameLine),
    Query(QueryLine),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioLine {
    pub line: usize,
    pub record: ScenarioRecord,
}

/// A timed event on the absolute timeline.
#[derive(Debug, Clone, PartialEq)]
pub enum TimedEvent {
    Frame(FrameRecord),
    Query { t_abs_ms: i64, text: String },
}

impl TimedEvent {
    pub fn t_abs_ms(&self) -> i64 {
        match self {
            TimedEvent::Frame(f) => f.t_abs_ms,
            TimedEvent::Query { t_abs_ms, .. } => *t_abs_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimedLine {
    pub line: usize,
    pub event: TimedEvent,
}

pub fn parse_line(line_no: usize, text: &str) -> Result<ScenarioRecord, ScenarioError> {
    let v: Value = serde_json::from_str(text).map_err(|e| ScenarioError::new(line_no, format!("invalid JSON: {e}")))?;
    let kind = v
        .get("type")
        .and_then(Value::as_str)
        .ok_or_else(|| ScenarioError::new(line_no, "missing string field `type`"))?
        .to_string();
    let bad = |e: serde_json::Error| ScenarioError::new(line_no, format!("invalid {kind} record: {e}"));
    match kind.as_str() {
        "anchor" => Ok(ScenarioRecord::Anchor(serde_json::from_value(v).map_err(bad)?)),
        "frame" => Ok(ScenarioRecord::Frame(serde_json::from_value(v).map_err(bad)?)),
        "query" => Ok(ScenarioRecord::Query(serde_json::from_value(v).map_err(bad)?)),
        other => Err(ScenarioError::new(line_no, format!("unknown record type {other:?}"))),
    }
}

/// Parses every non-blank line. Line numbers are 1-based.
pub fn parse_scenario(text: &str) -> Result<Vec<ScenarioLine>, ScenarioError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_line(i + 1, l).map(|record| ScenarioLine { line: i + 1, record })
        })
        .collect()
}

/// Applies anchors in file order and returns frames and queries on the
/// absolute timeline. Times must be nondecreasing in file order.
pub fn to_timeline(lines: &[ScenarioLine]) -> Result<Vec<TimedLine>, ScenarioError> {
    let mut clock = AnchorClock::default();
    let mut out = Vec::new();
    let mut last_t: Option<i64> = None;
    let mut next_frame_id = 0u64;
    for l in lines {
        let err = |e: StreamError| ScenarioError::new(l.line, e.to_string());
        let event = match &l.record {
            ScenarioRecord::Anchor(a) => {
                clock.set(*a).map_err(err)?;
                continue;
            }
            ScenarioRecord::Frame(f) => {
                let t = clock.align(f.t_rel_s).map_err(err)?;
                let feat = match (&f.feat, &f.summary) {
                    (Some(feat), _) => Some(feat.clone()),
                    (None, Some(s)) => Some(embed_bag(s)),
                    (None, None) => None,
                };
                let mut frame = FrameRecord::new(next_frame_id, t, feat).map_err(err)?;
                frame.labels = f.labels.clone();
                frame.summary = f.summary.clone();
                next_frame_id += 1;
                TimedEvent::Frame(frame)
            }
            ScenarioRecord::Query(q) => TimedEvent::Query {
                t_abs_ms: clock.align(q.t_rel_s).map_err(err)?,
                text: q.text.clone(),
            },
        };
        let t = event.t_abs_ms();
        if t < 0 {
            return Err(err(StreamError::NegativeTime(t)));
        }
        if let Some(prev) = last_t {
            if t < prev {
                return Err(err(StreamError::TimestampRegression { prev, got: t }));
            }
        }
        last_t = Some(t);
        out.push(TimedLine { line: l.line, event });
    }
    Ok(out)
}

pub fn load_timeline(text: &str) -> Result<Vec<TimedLine>, ScenarioError> {
    to_timeline(&parse_scenario(text)?)
}
