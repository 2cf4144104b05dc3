//! Inference boundary.
//!
//! Every model call in the runtime goes through [`Backend`]. The
//! [`MockBackend`] is fully deterministic and makes every algorithm testable
//! without weights; [`RemoteBackend`] speaks a line-delimited JSON protocol to
//! a model server.

mod mock;
mod remote;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stream::Chunk;

pub use mock::{embed_bag, fnv1a64, softmax_scores, MockBackend};
pub use remote::{RemoteBackend, RemoteConfig};

pub const BACKEND_ENV: &str = "STREAMCLAW_BACKEND";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend protocol error: {0}")]
    Protocol(String),
}

pub type Result<T> = std::result::Result<T, BackendError>;

/// L2-normalized (or zero) text embedding of dimension [`crate::vector::DIM`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TextEmbedding(pub Vec<f64>);

impl TextEmbedding {
    pub fn zero() -> Self {
        Self(crate::vector::zeros())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn cosine(&self, other: &TextEmbedding) -> f64 {
        crate::vector::cosine(&self.0, &other.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    /// Short summary.
    pub summary: String,
    /// Detailed description.
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryClass {
    Proactive,
    Memory,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Textual,
}

/// What the backend sees of one cached KV entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntrySummary {
    pub entry_id: u64,
    pub modality: Modality,
    pub key: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeStep {
    pub token_text: String,
    pub q_feat: Vec<f64>,
    /// Attention over visual entries; sums to one when non-empty.
    pub attn_scores: BTreeMap<u64, f64>,
}

/// Why the runtime is asking for free-form text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Answer,
    RewriteQuery,
    ProactiveResponse,
    AgentStep,
    SolveProblem,
}

/// A free-form generation request. `draft` is the deterministic rule-based
/// text the mock backend returns verbatim; real models get `prompt`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateRequest {
    pub purpose: Purpose,
    pub prompt: String,
    pub draft: String,
}

/// Optional clip bounds forwarded with a caption request (video cut).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRequest {
    pub query: String,
    pub path: String,
    pub start_time: f64,
    pub end_time: f64,
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn embed_text(&self, s: &str) -> Result<TextEmbedding>;

    fn caption_chunk(&self, c: &Chunk) -> Result<Caption>;

    /// Caption of a clipped sub-chunk with the caller's analysis query.
    fn caption_clip(&self, c: &Chunk, _clip: &ClipRequest) -> Result<Caption> {
        self.caption_chunk(c)
    }

    fn classify_query(&self, q: &str) -> Result<QueryClass>;

    fn decode(&self, context_text: &str, cache: &[EntrySummary]) -> Result<Vec<DecodeStep>>;

    fn generate(&self, req: &GenerateRequest) -> Result<String>;
}

impl fmt::Debug for dyn Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Backend({})", self.name())
    }
}

/// `mock` or `remote:<host:port>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSelector {
    Mock,
    Remote(String),
}

impl FromStr for BackendSelector {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        if s == "mock" {
            return Ok(Self::Mock);
        }
        match s.strip_prefix("remote:") {
            Some(addr) if !addr.is_empty() => Ok(Self::Remote(addr.to_string())),
            _ => Err(format!("invalid backend selector {s:?}; expected mock or remote:<host:port>")),
        }
    }
}

impl fmt::Display for BackendSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Mock => f.write_str("mock"),
            Self::Remote(a) => write!(f, "remote:{a}"),
        }
    }
}

impl BackendSelector {
    /// Reads [`BACKEND_ENV`]; unset means mock.
    pub fn from_env() -> std::result::Result<Self, String> {
        match std::env::var(BACKEND_ENV) {
            Ok(v) => v.parse(),
            Err(_) => Ok(Self::Mock),
        }
    }

    pub fn build(&self, layers: Vec<u32>) -> Arc<dyn Backend> {
        match self {
            Self::Mock => Arc::new(MockBackend::new()),
            Self::Remote(addr) => Arc::new(RemoteBackend::new(RemoteConfig {
                addr: addr.clone(),
                attention_layers: layers,
                ..RemoteConfig::default()
            })),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selector_parsing() {
        assert_eq!("mock".parse::<BackendSelector>().unwrap(), BackendSelector::Mock);
        assert_eq!(
            "remote:127.0.0.1:9000".parse::<BackendSelector>().unwrap(),
            BackendSelector::Remote("127.0.0.1:9000".into())
        );
        assert!("remote:".parse::<BackendSelector>().is_err());
        assert!("gpu".parse::<BackendSelector>().is_err());
        assert_eq!(BackendSelector::Remote("h:1".into()).to_string(), "remote:h:1");
    }
}
