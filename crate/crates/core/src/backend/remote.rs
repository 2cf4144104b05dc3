//! Client for a model server speaking newline-delimited JSON over TCP.
//!
//! One request per connection. Each request is a single JSON object line
//! with an `op` field (`embed`, `caption`, `classify`, `decode`). Replies are
//! one JSON object line, except `decode` which streams one line per decode
//! step and ends with `{"done":true}`. Any reply may instead be
//! `{"error":"..."}`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    Backend, BackendError, Caption, ClipRequest, DecodeStep, EntrySummary, GenerateRequest,
    QueryClass, Result, TextEmbedding,
};
use crate::stream::Chunk;
use crate::vector::{self, DIM};

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub addr: String,
    /// Layers whose attention scores are averaged. Empty means all reported layers.
    pub attention_layers: Vec<u32>,
    pub connect_timeout: Duration,
    pub io_timeout: Duration,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:7878".into(),
            attention_layers: Vec::new(),
            connect_timeout: Duration::from_secs(2),
            io_timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteBackend {
    cfg: RemoteConfig,
}

#[derive(Debug, Deserialize)]
struct WireStep {
    #[serde(default)]
    done: bool,
    #[serde(default)]
    token_text: String,
    #[serde(default)]
    q_feat: Option<Vec<f64>>,
    #[serde(default)]
    attn_scores: Option<BTreeMap<u64, f64>>,
    #[serde(default)]
    layer_scores: Option<BTreeMap<u32, BTreeMap<u64, f64>>>,
    #[serde(default)]
    error: Option<String>,
}

impl RemoteBackend {
    pub fn new(cfg: RemoteConfig) -> Self {
        Self { cfg }
    }

    fn connect(&self) -> Result<TcpStream> {
        let addrs = self
            .cfg
            .addr
            .to_socket_addrs()
            .map_err(|e| BackendError::Unavailable(format!("{}: {e}", self.cfg.addr)))?;
        let mut last = None;
        for a in addrs {
            match TcpStream::connect_timeout(&a, self.cfg.connect_timeout) {
                Ok(s) => {
                    s.set_read_timeout(Some(self.cfg.io_timeout)).ok();
                    s.set_write_timeout(Some(self.cfg.io_timeout)).ok();
                    return Ok(s);
                }
                Err(e) => last = Some(e),
            }
        }
        Err(BackendError::Unavailable(match last {
            Some(e) => format!("{}: {e}", self.cfg.addr),
            None => format!("{}: no address", self.cfg.addr),
        }))
    }

    fn send(&self, request: &Value) -> Result<BufReader<TcpStream>> {
        let mut stream = self.connect()?;
        let mut line = serde_json::to_string(request).map_err(|e| BackendError::Protocol(e.to_string()))?;
        line.push('\n');
        stream
            .write_all(line.as_bytes())
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Ok(BufReader::new(stream))
    }

    fn read_line(reader: &mut BufReader<TcpStream>) -> Result<Value> {
        let mut buf = String::new();
        let n = reader
            .read_line(&mut buf)
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        if n == 0 {
            return Err(BackendError::Unavailable("connection closed".into()));
        }
        let v: Value = serde_json::from_str(buf.trim()).map_err(|e| BackendError::Protocol(e.to_string()))?;
        if let Some(err) = v.get("error").and_then(Value::as_str) {
            return Err(BackendError::Protocol(err.to_string()));
        }
        Ok(v)
    }

    fn call(&self, request: Value) -> Result<Value> {
        let mut reader = self.send(&request)?;
        Self::read_line(&mut reader)
    }

    fn field<'a>(v: &'a Value, key: &str) -> Result<&'a Value> {
        v.get(key)
            .ok_or_else(|| BackendError::Protocol(format!("reply is missing `{key}`")))
    }

    fn caption_request(&self, c: &Chunk, clip: Option<&ClipRequest>) -> Result<Caption> {
        let v = self.call(json!({ "op": "caption", "chunk": c, "clip": clip }))?;
        serde_json::from_value(v).map_err(|e| BackendError::Protocol(e.to_string()))
    }

    fn average_layers(&self, layers: &BTreeMap<u32, BTreeMap<u64, f64>>) -> BTreeMap<u64, f64> {
        let selected: Vec<&BTreeMap<u64, f64>> = if self.cfg.attention_layers.is_empty() {
            layers.values().collect()
        } else {
            self.cfg.attention_layers.iter().filter_map(|l| layers.get(l)).collect()
        };
        let mut out: BTreeMap<u64, f64> = BTreeMap::new();
        if selected.is_empty() {
            return out;
        }
        for scores in &selected {
            for id in scores.keys() {
                out.entry(*id).or_insert(0.0);
            }
        }
        let n = selected.len() as f64;
        for (id, acc) in out.iter_mut() {
            for scores in &selected {
                *acc += scores.get(id).copied().unwrap_or(0.0);
            }
            *acc /= n;
        }
        out
    }

    fn decode_request(&self, context: &str, cache: &[EntrySummary], purpose: Option<&GenerateRequest>) -> Result<Vec<DecodeStep>> {
        let request = json!({
            "op": "decode",
            "context": context,
            "entries": cache,
            "layers": self.cfg.attention_layers,
            "purpose": purpose.map(|p| p.purpose),
        });
        let mut reader = self.send(&request)?;
        let mut steps = Vec::new();
        loop {
            let v = Self::read_line(&mut reader)?;
            let step: WireStep = serde_json::from_value(v).map_err(|e| BackendError::Protocol(e.to_string()))?;
            if let Some(e) = step.error {
                return Err(BackendError::Protocol(e));
            }
            if step.done {
                break;
            }
            let attn_scores = match (step.layer_scores, step.attn_scores) {
                (Some(layers), _) => self.average_layers(&layers),
                (None, Some(scores)) => scores,
                (None, None) => BTreeMap::new(),
            };
            let q_feat = step.q_feat.map(fit_dimension).unwrap_or_else(vector::zeros);
            steps.push(DecodeStep {
                token_text: step.token_text,
                q_feat,
                attn_scores,
            });
        }
        Ok(steps)
    }
}

/// Truncates or zero-pads to [`DIM`].
fn fit_dimension(mut v: Vec<f64>) -> Vec<f64> {
    v.resize(DIM, 0.0);
    v
}

impl Backend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn embed_text(&self, s: &str) -> Result<TextEmbedding> {
        let v = self.call(json!({ "op": "embed", "text": s }))?;
        let raw: Vec<f64> = serde_json::from_value(Self::field(&v, "embedding")?.clone())
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        let mut e = fit_dimension(raw);
        vector::normalize(&mut e);
        Ok(TextEmbedding(e))
    }

    fn caption_chunk(&self, c: &Chunk) -> Result<Caption> {
        self.caption_request(c, None)
    }

    fn caption_clip(&self, c: &Chunk, clip: &ClipRequest) -> Result<Caption> {
        self.caption_request(c, Some(clip))
    }

    fn classify_query(&self, q: &str) -> Result<QueryClass> {
        let v = self.call(json!({ "op": "classify", "query": q }))?;
        serde_json::from_value(Self::field(&v, "class")?.clone()).map_err(|e| BackendError::Protocol(e.to_string()))
    }

    fn decode(&self, context_text: &str, cache: &[EntrySummary]) -> Result<Vec<DecodeStep>> {
        self.decode_request(context_text, cache, None)
    }

    fn generate(&self, req: &GenerateRequest) -> Result<String> {
        let steps = self.decode_request(&req.prompt, &[], Some(req))?;
        Ok(steps.into_iter().map(|s| s.token_text).collect())
    }
}
