//! Deterministic offline backend.
//!
//! Embeddings are hashed bag-of-words vectors. A chunk caption is its distinct
//! frame labels (summary) and distinct frame summaries (detail). Queries are
//! classified by keyword cues, and free-form generation returns the draft.

use std::collections::BTreeMap;

use super::{
    Backend, Caption, DecodeStep, EntrySummary, GenerateRequest, Modality, QueryClass, Result,
    TextEmbedding,
};
use crate::stream::Chunk;
use crate::vector::{self, DIM};

const PROACTIVE_CUES: &[&str] = &["remind", "alert", "notify", "warn", "watch for"];
const MEMORY_CUES: &[&str] = &["ago", "earlier", "before", "yesterday", "last time", "compared to"];

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Hashed bag-of-words embedding: lowercase, whitespace tokens, one bucket
/// per token, then L2 normalization.
pub fn embed_bag(s: &str) -> Vec<f64> {
    let mut v = vector::zeros();
    for w in s.to_lowercase().split_whitespace() {
        v[(fnv1a64(w.as_bytes()) % DIM as u64) as usize] += 1.0;
    }
    vector::normalize(&mut v);
    v
}

/// Softmax of `q·k/√d` over the visual entries of `cache`, in cache order.
pub fn softmax_scores(q: &[f64], cache: &[EntrySummary]) -> BTreeMap<u64, f64> {
    let scale = (DIM as f64).sqrt();
    let logits: Vec<(u64, f64)> = cache
        .iter()
        .filter(|e| e.modality == Modality::Visual)
        .map(|e| (e.entry_id, vector::dot(q, &e.key) / scale))
        .collect();
    if logits.is_empty() {
        return BTreeMap::new();
    }
    let max = logits.iter().map(|(_, l)| *l).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<(u64, f64)> = logits.iter().map(|(id, l)| (*id, (l - max).exp())).collect();
    let mut total = 0.0;
    for (_, e) in &exps {
        total += e;
    }
    exps.into_iter().map(|(id, e)| (id, e / total)).collect()
}

/// Deterministic, stateless backend used for tests and offline replay.
#[derive(Debug, Default, Clone)]
pub struct MockBackend;

impl MockBackend {
    pub fn new() -> Self {
        Self
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn embed_text(&self, s: &str) -> Result<TextEmbedding> {
        Ok(TextEmbedding(embed_bag(s)))
    }

    fn caption_chunk(&self, c: &Chunk) -> Result<Caption> {
        let summary = c.distinct_labels().join(" ");
        let mut details: Vec<&str> = Vec::new();
        for s in c.frames.iter().filter_map(|f| f.summary.as_deref()) {
            if !s.is_empty() && !details.contains(&s) {
                details.push(s);
            }
        }
        let detail = details.join("; ");
        Ok(Caption { summary, detail })
    }

    fn classify_query(&self, q: &str) -> Result<QueryClass> {
        let lower = q.to_lowercase();
        if PROACTIVE_CUES.iter().any(|k| lower.contains(k)) {
            Ok(QueryClass::Proactive)
        } else if MEMORY_CUES.iter().any(|k| lower.contains(k)) {
            Ok(QueryClass::Memory)
        } else {
            Ok(QueryClass::Direct)
        }
    }

    /// The mock "response" is the token sequence of the context's last line.
    fn decode(&self, context_text: &str, cache: &[EntrySummary]) -> Result<Vec<DecodeStep>> {
        let last = context_text.lines().last().unwrap_or("");
        Ok(last
            .split_whitespace()
            .map(|tok| {
                let q = embed_bag(tok);
                let attn_scores = softmax_scores(&q, cache);
                DecodeStep {
                    token_text: tok.to_string(),
                    q_feat: q,
                    attn_scores,
                }
            })
            .collect())
    }

    fn generate(&self, req: &GenerateRequest) -> Result<String> {
        Ok(req.draft.clone())
    }
}
