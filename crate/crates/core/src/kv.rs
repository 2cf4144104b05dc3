//! Streaming KV cache with a dynamic sliding window.
//!
//! Visual tokens are written only when they are not redundant with what is
//! already cached (cosine similarity against every cached visual key must not
//! exceed the redundancy threshold). After each decode pass the attention
//! scores reported by the backend overwrite the per-entry scores and only the
//! top `p%` visual entries survive. Textual entries are never pruned; they
//! leave the cache only when the window slides past them.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{EntrySummary, Modality};
use crate::vector;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KvError {
    #[error("unknown cache entry {0}")]
    UnknownEntry(u64),
    #[error("invalid prune config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvEntry {
    pub entry_id: u64,
    pub modality: Modality,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub write_ms: i64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Retained fraction of visual entries, in percent.
    pub p_percent: f64,
    pub redundancy_threshold: f64,
    pub window_seconds: f64,
    /// Attention layers averaged by remote backends.
    pub layers: Vec<u32>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            p_percent: 25.0,
            redundancy_threshold: 0.95,
            window_seconds: 20.0,
            layers: Vec::new(),
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<(), KvError> {
        if !(self.p_percent > 0.0 && self.p_percent <= 100.0) {
            return Err(KvError::InvalidConfig(format!("p_percent {} not in (0, 100]", self.p_percent)));
        }
        if !(0.0..=1.0).contains(&self.redundancy_threshold) {
            return Err(KvError::InvalidConfig(format!(
                "redundancy_threshold {} not in [0, 1]",
                self.redundancy_threshold
            )));
        }
        if !(self.window_seconds > 0.0) {
            return Err(KvError::InvalidConfig(format!("window_seconds {} must be positive", self.window_seconds)));
        }
        Ok(())
    }

    /// Number of visual entries kept out of `n`: `ceil(p/100 * n)`.
    pub fn retained(&self, n: usize) -> usize {
        if n == 0 {
            return 0;
        }
        // the epsilon absorbs representation error in exact products such as 30% of 10
        let k = (self.p_percent * n as f64 / 100.0 - 1e-9).ceil();
        (k.max(0.0) as usize).min(n)
    }

    pub fn window_ms(&self) -> i64 {
        (self.window_seconds * 1000.0).round() as i64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualToken {
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub write_ms: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WriteOutcome {
    pub written: usize,
    pub skipped: usize,
    pub written_ids: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct KvWindow {
    cfg: PruneConfig,
    entries: Vec<KvEntry>,
    next_id: u64,
    scored: bool,
}

impl KvWindow {
    pub fn new(cfg: PruneConfig) -> Result<Self, KvError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            entries: Vec::new(),
            next_id: 0,
            scored: false,
        })
    }

    pub fn config(&self) -> &PruneConfig {
        &self.cfg
    }

    pub fn entries(&self) -> &[KvEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn visual_count(&self) -> usize {
        self.entries.iter().filter(|e| e.modality == Modality::Visual).count()
    }

    pub fn get(&self, id: u64) -> Option<&KvEntry> {
        self.entries.iter().find(|e| e.entry_id == id)
    }

    fn push(&mut self, modality: Modality, key: Vec<f64>, value: Vec<f64>, write_ms: i64) -> u64 {
        let entry_id = self.next_id;
        self.next_id += 1;
        self.entries.push(KvEntry {
            entry_id,
            modality,
            key,
            value,
            write_ms,
            score: 0.0,
        });
        entry_id
    }

    /// Writes visual tokens in order, skipping each one whose best cosine
    /// match among cached visual keys (including ones written earlier in
    /// this batch) is strictly above the redundancy threshold.
    pub fn write_visual_tokens(&mut self, tokens: Vec<VisualToken>) -> WriteOutcome {
        let mut out = WriteOutcome::default();
        for t in tokens {
            let redundant = self
                .entries
                .iter()
                .filter(|e| e.modality == Modality::Visual)
                .any(|e| vector::cosine(&t.key, &e.key) > self.cfg.redundancy_threshold);
            if redundant {
                out.skipped += 1;
            } else {
                let id = self.push(Modality::Visual, t.key, t.value, t.write_ms);
                out.written += 1;
                out.written_ids.push(id);
            }
        }
        out
    }

    pub fn write_textual(&mut self, key: Vec<f64>, value: Vec<f64>, write_ms: i64) -> u64 {
        self.push(Modality::Textual, key, value, write_ms)
    }

    /// Overwrites the score of every named entry. Validates all ids before
    /// touching anything.
    pub fn apply_attention(&mut self, scores: &BTreeMap<u64, f64>) -> Result<(), KvError> {
        if let Some(missing) = scores.keys().find(|id| self.get(**id).is_none()) {
            return Err(KvError::UnknownEntry(*missing));
        }
        if scores.is_empty() {
            return Ok(());
        }
        for e in self.entries.iter_mut() {
            if let Some(s) = scores.get(&e.entry_id) {
                e.score = *s;
            }
        }
        self.scored = true;
        Ok(())
    }

    /// Keeps the `ceil(p/100 * N_visual)` best-scored visual entries. Ties
    /// prefer the earlier write, then the lower id. Returns removed ids ascending.
    ///
    /// Each pass consumes the scores of the latest `apply_attention`; without
    /// fresh scores it removes nothing.
    pub fn prune_top_p(&mut self) -> Vec<u64> {
        if !self.scored {
            return Vec::new();
        }
        self.scored = false;
        let mut visual: Vec<&KvEntry> = self.entries.iter().filter(|e| e.modality == Modality::Visual).collect();
        let keep = self.cfg.retained(visual.len());
        visual.sort_by(|a, b| retention_order(a, b));
        let mut removed: Vec<u64> = visual[keep..].iter().map(|e| e.entry_id).collect();
        removed.sort_unstable();
        if !removed.is_empty() {
            self.entries.retain(|e| removed.binary_search(&e.entry_id).is_err());
        }
        removed
    }

    /// Removes and returns every entry written before `now_ms - W`.
    pub fn slide_window(&mut self, now_ms: i64) -> Vec<KvEntry> {
        let cutoff = now_ms - self.cfg.window_ms();
        let (old, keep): (Vec<KvEntry>, Vec<KvEntry>) = std::mem::take(&mut self.entries)
            .into_iter()
            .partition(|e| e.write_ms < cutoff);
        self.entries = keep;
        old
    }

    pub fn snapshot(&self) -> Vec<EntrySummary> {
        self.entries
            .iter()
            .map(|e| EntrySummary {
                entry_id: e.entry_id,
                modality: e.modality,
                key: e.key.clone(),
            })
            .collect()
    }
}

fn retention_order(a: &KvEntry, b: &KvEntry) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.write_ms.cmp(&b.write_ms))
        .then(a.entry_id.cmp(&b.entry_id))
}
