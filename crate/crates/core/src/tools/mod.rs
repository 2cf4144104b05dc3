//! Tools, skills and the agentic call loop.
//!
//! Tools are built in: `video_cut` and `call_memory` do real work, while
//! `web_search` and `image_zoom` are registered stubs. Skills come from
//! manifests (see [`skills`]). Both are invoked with the same wire shape,
//! `{"tool": <name>, "args": {...}}`.

pub mod agent;
pub mod skills;

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::backend::{Backend, BackendError, ClipRequest};
use crate::memory::{AgentView, MemoryStore, RetrievalCommand, RetrievalHit, RetrievalMode, Traversal};
use crate::stream::{Chunk, Density, FrameRecord};

pub use agent::{parse_agent_output, run_agentic_loop, AgentOutput, LoopOutcome, StepRecord};
pub use skills::{SkillError, SkillManifest, SkillRegistry, SkillSummary};

pub const NO_MEMORY: &str = "NO_MEMORY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    #[serde(rename = "tool")]
    pub name: String,
    #[serde(default)]
    pub args: Map<String, Value>,
}

pub type SkillCall = ToolCall;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ToolError {
    #[error("end_time {end} must be larger than start_time {start}")]
    InvalidTimeRange { start: f64, end: f64 },
    #[error("source {0:?} not found")]
    SourceNotFound(String),
    #[error("unknown tool {0:?}")]
    UnknownTool(String),
    #[error("invalid arguments for {tool}: {message}")]
    InvalidArgs { tool: String, message: String },
    #[error("tool {0} is not available in this runtime")]
    NotAvailable(String),
    #[error("duplicate tool {0:?}")]
    Duplicate(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Memory(#[from] crate::memory::MemoryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgType {
    String,
    Number,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArgSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ArgType,
    pub required: bool,
    pub default: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub args: Vec<ArgSpec>,
    pub returns: String,
}

impl ToolSpec {
    fn arg(name: &str, ty: ArgType) -> ArgSpec {
        ArgSpec {
            name: name.into(),
            ty,
            required: true,
            default: None,
        }
    }

    /// Checks presence, unknown keys and types.
    pub fn validate(&self, call: &ToolCall) -> Result<(), ToolError> {
        let bad = |message: String| ToolError::InvalidArgs {
            tool: self.name.clone(),
            message,
        };
        if let Some(k) = call.args.keys().find(|k| !self.args.iter().any(|a| &a.name == *k)) {
            return Err(bad(format!("unknown argument {k:?}")));
        }
        for a in &self.args {
            match call.args.get(&a.name) {
                None if a.required => return Err(bad(format!("missing argument {:?}", a.name))),
                None => {}
                Some(v) => {
                    let ok = match a.ty {
                        ArgType::String => v.is_string(),
                        ArgType::Number => v.is_number(),
                    };
                    if !ok {
                        return Err(bad(format!("argument {:?} must be a {:?}", a.name, a.ty)));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ToolRegistry {
    specs: BTreeMap<String, ToolSpec>,
}

impl ToolRegistry {
    pub fn new(specs: Vec<ToolSpec>) -> Result<Self, ToolError> {
        let mut map = BTreeMap::new();
        for s in specs {
            if let Some(a) = s.args.iter().find(|a| a.required && a.default.is_some()) {
                return Err(ToolError::InvalidArgs {
                    tool: s.name.clone(),
                    message: format!("required argument {:?} has a default", a.name),
                });
            }
            let name = s.name.clone();
            if map.insert(name.clone(), s).is_some() {
                return Err(ToolError::Duplicate(name));
            }
        }
        Ok(Self { specs: map })
    }

    pub fn builtin() -> Self {
        use ArgType::*;
        let tool_spec = |name: &str, description: &str, args: Vec<ArgSpec>| ToolSpec {
            name: name.into(),
            description: description.into(),
            args,
            returns: "textual response".into(),
        };
        Self::new(vec![
            tool_spec(
                "video_cut",
                "Caption a sub-clip between two timestamps",
                vec![
                    ToolSpec::arg("query", String),
                    ToolSpec::arg("path", String),
                    ToolSpec::arg("start_time", Number),
                    ToolSpec::arg("end_time", Number),
                ],
            ),
            tool_spec("call_memory", "Retrieve memory nodes for a query", vec![ToolSpec::arg("query", String)]),
            tool_spec("web_search", "Web search (unavailable)", vec![ToolSpec::arg("query", String)]),
            tool_spec(
                "image_zoom",
                "Image magnification (unavailable)",
                vec![ToolSpec::arg("path", String), ToolSpec::arg("region", String)],
            ),
        ])
        .expect("builtin tools are valid")
    }

    pub fn get(&self, name: &str) -> Option<&ToolSpec> {
        self.specs.get(name)
    }

    pub fn specs(&self) -> impl Iterator<Item = &ToolSpec> {
        self.specs.values()
    }
}

/// Every ingested frame per source, kept outside the bounded stream cache so
/// clips can be cut from the whole history.
#[derive(Debug, Clone, Default)]
pub struct FrameArchive {
    sources: BTreeMap<String, (i64, Vec<FrameRecord>)>,
}

impl FrameArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a source whose second 0 is `origin_ms`.
    pub fn add_source(&mut self, path: &str, origin_ms: i64) {
        self.sources.entry(path.to_string()).or_insert((origin_ms, Vec::new()));
    }

    pub fn push(&mut self, path: &str, frame: FrameRecord) {
        if let Some((_, frames)) = self.sources.get_mut(path) {
            frames.push(frame);
        }
    }

    pub fn contains(&self, path: &str) -> bool {
        self.sources.contains_key(path)
    }

    /// Frames with `origin + start ≤ t < origin + end`.
    pub fn clip(&self, path: &str, start_s: f64, end_s: f64) -> Option<Vec<FrameRecord>> {
        let (origin, frames) = self.sources.get(path)?;
        let lo = origin + (start_s * 1000.0).round() as i64;
        let hi = origin + (end_s * 1000.0).round() as i64;
        Some(frames.iter().filter(|f| f.t_abs_ms >= lo && f.t_abs_ms < hi).cloned().collect())
    }

    pub fn origin(&self, path: &str) -> Option<i64> {
        self.sources.get(path).map(|(o, _)| *o)
    }
}

fn fmt_seconds(x: f64) -> String {
    format!("{x}")
}

/// Captions the frames in `[start, end)` seconds of `path`. Text only.
pub fn video_cut(
    backend: &dyn Backend,
    archive: &FrameArchive,
    query: &str,
    path: &str,
    start_time: f64,
    end_time: f64,
) -> Result<String, ToolError> {
    if !(end_time > start_time) {
        return Err(ToolError::InvalidTimeRange {
            start: start_time,
            end: end_time,
        });
    }
    let frames = archive
        .clip(path, start_time, end_time)
        .ok_or_else(|| ToolError::SourceNotFound(path.to_string()))?;
    let origin = archive.origin(path).unwrap_or(0);
    let chunk = Chunk {
        chunk_id: 0,
        start_ms: origin + (start_time * 1000.0).round() as i64,
        end_ms: origin + (end_time * 1000.0).round() as i64,
        frames,
        density: Density::Fast,
    };
    let clip = ClipRequest {
        query: query.to_string(),
        path: path.to_string(),
        start_time,
        end_time,
    };
    let caption = backend.caption_clip(&chunk, &clip)?;
    let mut out = format!("[{}-{}] {}", fmt_seconds(start_time), fmt_seconds(end_time), caption.summary);
    if !caption.detail.is_empty() {
        out.push_str(" — ");
        out.push_str(&caption.detail);
    }
    Ok(out.trim_end().to_string())
}

fn time_reference_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)\b(?:(?:\d+(?:\.\d+)?|an?|one|two|three|four|five|six|seven|eight|nine|ten|fifteen|twenty|thirty|sixty)\s+(?:seconds?|secs?|minutes?|mins?|hours?)\s+ago|earlier|yesterday|last time|before)\b",
        )
        .expect("time reference regex")
    })
}

/// The first time reference in `q` ("five minutes ago", "earlier", ...).
pub fn time_reference(q: &str) -> Option<(usize, &str)> {
    time_reference_regex().find(q).map(|m| (m.start(), m.as_str()))
}

pub fn memory_command(query: &str) -> RetrievalCommand {
    RetrievalCommand {
        query: query.to_string(),
        mode: if time_reference(query).is_some() {
            RetrievalMode::Temporal
        } else {
            RetrievalMode::SingleFact
        },
        traversal: Traversal::SalienceFirst,
        budget: 64,
        top_k: 3,
        hit_threshold: 0.8,
    }
}

/// One line per hit; hits repeating an earlier span and text are dropped.
pub fn render_hits(hits: &[RetrievalHit]) -> String {
    if hits.is_empty() {
        return NO_MEMORY.to_string();
    }
    let mut seen = std::collections::BTreeSet::new();
    hits.iter()
        .filter(|h| seen.insert((h.start_ms, h.tau, h.s.as_str(), h.c.as_str())))
        .map(|h| {
            let mut line = format!("[{}-{}] {}", h.start_ms, h.tau, h.s);
            if !h.c.is_empty() {
                line.push_str(" — ");
                line.push_str(&h.c);
            }
            line
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Retrieves under the reasoning view and renders one line per hit.
pub fn call_memory(store: &MemoryStore, query: &str) -> Result<(String, Vec<RetrievalHit>), ToolError> {
    let out = store.retrieve(&memory_command(query), &AgentView::reasoning())?;
    Ok((render_hits(&out.hits), out.hits))
}

pub fn number_arg(call: &ToolCall, key: &str) -> Option<f64> {
    call.args.get(key).and_then(Value::as_f64)
}

pub fn string_arg<'a>(call: &'a ToolCall, key: &str) -> Option<&'a str> {
    call.args.get(key).and_then(Value::as_str)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use serde_json::json;

    use super::*;
    use crate::backend::MockBackend;
    use crate::memory::HmeParams;

    fn archive() -> FrameArchive {
        let mut a = FrameArchive::new();
        a.add_source("match", 1_000_000);
        for (t, l) in [(4.0, "kickoff"), (6.0, "goal_scored"), (8.0, "celebration"), (12.0, "replay")] {
            let f = FrameRecord::new(0, 1_000_000 + (t * 1000.0) as i64, None).unwrap().with_labels([l]);
            a.push("match", f);
        }
        a
    }

    #[test]
    fn video_cut_captions_range() {
        let mut a = FrameArchive::new();
        a.add_source("m", 0);
        a.push("m", FrameRecord::new(0, 6000, None).unwrap().with_labels(["goal_scored"]));
        assert_eq!(video_cut(&MockBackend, &a, "what", "m", 5.0, 10.0).unwrap(), "[5-10] goal_scored");
    }

    #[test]
    fn video_cut_rejects_bad_ranges_and_paths() {
        let a = archive();
        assert!(matches!(
            video_cut(&MockBackend, &a, "q", "match", 10.0, 10.0),
            Err(ToolError::InvalidTimeRange { .. })
        ));
        assert!(matches!(
            video_cut(&MockBackend, &a, "q", "match", 10.0, 9.0),
            Err(ToolError::InvalidTimeRange { .. })
        ));
        assert_eq!(
            video_cut(&MockBackend, &a, "q", "nope", 0.0, 1.0),
            Err(ToolError::SourceNotFound("nope".into()))
        );
    }

    #[test]
    fn refinement_narrows_labels() {
        let a = archive();
        let wide = video_cut(&MockBackend, &a, "q", "match", 0.0, 13.0).unwrap();
        let narrow = video_cut(&MockBackend, &a, "q", "match", 5.5, 8.5).unwrap();
        assert_eq!(wide, "[0-13] kickoff goal_scored celebration replay");
        assert_eq!(narrow, "[5.5-8.5] goal_scored celebration");
    }

    #[test]
    fn call_memory_empty_and_single() {
        let mut m = MemoryStore::new(HmeParams::default(), Arc::new(MockBackend::new()));
        assert_eq!(call_memory(&m, "anything").unwrap().0, NO_MEMORY);
        let chunk = Chunk {
            chunk_id: 0,
            start_ms: 0,
            end_ms: 2000,
            frames: vec![FrameRecord::new(0, 0, None).unwrap().with_labels(["heavy_traffic"])],
            density: Density::Fast,
        };
        m.write_segment(&chunk, "heavy_traffic", "many cars").unwrap();
        let (text, hits) = call_memory(&m, "heavy_traffic").unwrap();
        assert!((hits[0].relevance - 1.0).abs() < 1e-12);
        // atomic action and event share the summary; the earlier-created one ranks first
        assert_eq!(text.lines().next().unwrap(), "[0-2000] heavy_traffic — many cars");
    }

    #[test]
    fn memory_command_modes() {
        assert_eq!(memory_command("what was there five minutes ago").mode, RetrievalMode::Temporal);
        assert_eq!(memory_command("where are my keys").mode, RetrievalMode::SingleFact);
        assert_eq!(time_reference("compared to 5 minutes ago?").unwrap().1, "5 minutes ago");
    }

    #[test]
    fn tool_validation() {
        let r = ToolRegistry::builtin();
        let tool_spec = r.get("video_cut").unwrap();
        let call = |args: Value| ToolCall {
            name: "video_cut".into(),
            args: args.as_object().unwrap().clone(),
        };
        assert!(tool_spec
            .validate(&call(json!({"query": "q", "path": "p", "start_time": 1, "end_time": 2.5})))
            .is_ok());
        assert!(tool_spec.validate(&call(json!({"query": "q", "path": "p", "start_time": 1}))).is_err());
        assert!(tool_spec
            .validate(&call(json!({"query": "q", "path": "p", "start_time": "1", "end_time": 2})))
            .is_err());
        assert!(tool_spec
            .validate(&call(json!({"query": "q", "path": "p", "start_time": 1, "end_time": 2, "x": 0})))
            .is_err());
    }

    #[test]
    fn registry_rejects_defaults_on_required_and_duplicates() {
        let mut a = ToolSpec::arg("x", ArgType::String);
        a.default = Some(json!("d"));
        let tool_spec = ToolSpec {
            name: "t".into(),
            description: String::new(),
            args: vec![a],
            returns: "textual response".into(),
        };
        assert!(ToolRegistry::new(vec![tool_spec]).is_err());
        let plain = ToolRegistry::builtin().get("call_memory").unwrap().clone();
        assert_eq!(ToolRegistry::new(vec![plain.clone(), plain]).unwrap_err(), ToolError::Duplicate("call_memory".into()));
    }
}
