//! Text rules used when drafting routed answers.

use std::sync::OnceLock;

use regex::Regex;
use serde_json::Value;

use crate::backend::Caption;
use crate::config::Intent;
use crate::tools::{time_reference, ToolCall};

const FILLER: &[&str] = &[
    "what", "whats", "what's", "has", "have", "had", "changed", "change", "changes", "in", "was", "were", "is", "are",
    "did", "does", "do", "how", "the", "about", "happened", "happen", "to", "with", "of", "there", "describe", "tell",
    "me", "show", "see", "saw", "i", "you", "been", "going", "on", "a", "an", "so", "far", "where", "when", "which",
    "who", "why",
];

fn memory_cue_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(?:ago|earlier|before|yesterday|last time|compared to)\b").expect("cue regex"))
}

fn clip_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\bfrom\s+(\d+(?:\.\d+)?)\s*(?:s|secs?|seconds?)?\s+to\s+(\d+(?:\.\d+)?)\s*(?:s|secs?|seconds?)\b")
            .expect("clip regex")
    })
}

fn strip_filler<'a>(words: &[&'a str]) -> Vec<&'a str> {
    let is_filler = |w: &&str| FILLER.contains(&w.to_lowercase().as_str());
    let start = words.iter().position(|w| !is_filler(w)).unwrap_or(words.len());
    let end = words.iter().rposition(|w| !is_filler(w)).map_or(start, |i| i + 1);
    words[start..end.max(start)].to_vec()
}

/// Retrieval instruction for a memory-path query:
/// `Describe the <topic> and key characteristics <time reference> in detail.`
pub fn rewrite_memory_query(q: &str) -> String {
    let text = q.trim().trim_end_matches(['?', '.', '!']).trim();
    let cue = memory_cue_regex().find(text);
    let tref = time_reference(text);
    let split = [cue.map(|m| m.start()), tref.map(|(p, _)| p)]
        .into_iter()
        .flatten()
        .min()
        .unwrap_or(text.len());
    let head: Vec<&str> = text[..split].split_whitespace().collect();
    let topic = strip_filler(&head).join(" ");
    let topic = if topic.is_empty() { "scene".to_string() } else { topic };
    let when = match (tref, cue) {
        (Some((_, t)), _) => t.to_string(),
        (None, Some(m)) if !m.as_str().eq_ignore_ascii_case("compared to") && !m.as_str().eq_ignore_ascii_case("ago") => {
            m.as_str().to_string()
        }
        _ => "earlier".to_string(),
    };
    format!("Describe the {topic} and key characteristics {when} in detail.")
}

/// One-line description of what is in view.
pub fn describe_window(c: &Caption) -> String {
    match (c.summary.is_empty(), c.detail.is_empty()) {
        (true, true) => "nothing notable in view".to_string(),
        (false, true) => c.summary.clone(),
        (true, false) => c.detail.clone(),
        (false, false) => format!("{} ({})", c.summary, c.detail),
    }
}

fn substitute(v: &Value, query: &str) -> Value {
    match v {
        Value::String(s) if s == "$query" => Value::String(query.to_string()),
        Value::Object(m) => Value::Object(m.iter().map(|(k, v)| (k.clone(), substitute(v, query))).collect()),
        Value::Array(a) => Value::Array(a.iter().map(|v| substitute(v, query)).collect()),
        other => other.clone(),
    }
}

/// A `video_cut` call when the query names a span "from X to Y seconds".
pub fn clip_call(q: &str, source: &str) -> Option<ToolCall> {
    let caps = clip_regex().captures(q)?;
    let start: f64 = caps[1].parse().ok()?;
    let end: f64 = caps[2].parse().ok()?;
    let mut args = serde_json::Map::new();
    args.insert("query".into(), Value::String(q.to_string()));
    args.insert("path".into(), Value::String(source.to_string()));
    args.insert("start_time".into(), serde_json::json!(start));
    args.insert("end_time".into(), serde_json::json!(end));
    Some(ToolCall {
        name: "video_cut".into(),
        args,
    })
}

/// First configured intent whose keyword occurs in the query.
pub fn match_intent<'a>(q: &str, intents: &'a [Intent]) -> Option<(&'a Intent, ToolCall)> {
    let lower = q.to_lowercase();
    intents
        .iter()
        .find(|i| i.keywords.iter().any(|k| lower.contains(&k.to_lowercase())))
        .map(|i| {
            let args = match substitute(&Value::Object(i.args.clone()), q) {
                Value::Object(m) => m,
                _ => unreachable!("object maps to object"),
            };
            (
                i,
                ToolCall {
                    name: i.call.clone(),
                    args,
                },
            )
        })
}
