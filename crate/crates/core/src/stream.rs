//! Stream ingest: timestamp alignment, the shared frame cache and chunk cutting.
//!
//! Every device reports device-relative seconds. A [`TimeAnchor`] maps those
//! onto absolute epoch milliseconds; all downstream components only ever see
//! absolute time. Frames land in a bounded [`SharedStreamCache`] that agents
//! read through [`SharedStreamCache::window`], and the [`Chunker`] tiles the
//! timeline into fixed-duration [`Chunk`]s, the unit of streaming inference.

use std::collections::VecDeque;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vector::DIM;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StreamError {
    #[error("no time anchor set for stream")]
    AnchorMissing,
    #[error("timestamp regression: {got} ms after {prev} ms")]
    TimestampRegression { prev: i64, got: i64 },
    #[error("feature vector has {got} elements, expected {DIM}")]
    FeatureDimension { got: usize },
    #[error("absolute time must be non-negative, got {0}")]
    NegativeTime(i64),
}

/// Maps device-relative seconds to absolute milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeAnchor {
    pub device_rel_s: f64,
    pub abs_ms: i64,
}

pub fn align_timestamp(rel_s: f64, anchor: Option<&TimeAnchor>) -> Result<i64, StreamError> {
    let anchor = anchor.ok_or(StreamError::AnchorMissing)?;
    Ok(anchor.abs_ms + (1000.0 * (rel_s - anchor.device_rel_s)).round() as i64)
}

/// Holds the single active anchor of one stream. A later anchor replaces the earlier one.
#[derive(Debug, Default, Clone)]
pub struct AnchorClock {
    anchor: Option<TimeAnchor>,
}

impl AnchorClock {
    pub fn set(&mut self, anchor: TimeAnchor) -> Result<(), StreamError> {
        if anchor.abs_ms < 0 {
            return Err(StreamError::NegativeTime(anchor.abs_ms));
        }
        self.anchor = Some(anchor);
        Ok(())
    }

    pub fn anchor(&self) -> Option<&TimeAnchor> {
        self.anchor.as_ref()
    }

    pub fn align(&self, rel_s: f64) -> Result<i64, StreamError> {
        align_timestamp(rel_s, self.anchor.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub t_abs_ms: i64,
    pub feat: Vec<f64>,
    pub labels: Vec<String>,
    pub summary: Option<String>,
}

impl FrameRecord {
    pub fn new(frame_id: u64, t_abs_ms: i64, feat: Option<Vec<f64>>) -> Result<Self, StreamError> {
        let feat = match feat {
            Some(f) if f.len() != DIM => return Err(StreamError::FeatureDimension { got: f.len() }),
            Some(f) => f,
            None => crate::vector::zeros(),
        };
        Ok(Self {
            frame_id,
            t_abs_ms,
            feat,
            labels: Vec::new(),
            summary: None,
        })
    }

    pub fn with_labels<I, S>(mut self, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.labels = labels.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_summary(mut self, summary: impl Into<String>) -> Self {
        self.summary = Some(summary.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Density {
    Fast,
    Slow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: u64,
    pub start_ms: i64,
    pub end_ms: i64,
    pub frames: Vec<FrameRecord>,
    pub density: Density,
}

impl Chunk {
    /// Distinct frame labels in first-occurrence order.
    pub fn distinct_labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for f in &self.frames {
            for l in &f.labels {
                if !out.contains(l) {
                    out.push(l.clone());
                }
            }
        }
        out
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.frames.iter().any(|f| f.labels.iter().any(|l| l == label))
    }
}

/// Bounded FIFO of frames shared by every agent.
#[derive(Debug, Clone)]
pub struct SharedStreamCache {
    queue: VecDeque<FrameRecord>,
    max_len: usize,
    slow_stride: usize,
    last_t: Option<i64>,
}

pub type SharedCache = Arc<RwLock<SharedStreamCache>>;

impl SharedStreamCache {
    pub fn new(max_len: usize, slow_stride: usize) -> Self {
        assert!(max_len > 0, "cache max_len must be positive");
        assert!(slow_stride > 0, "slow_stride must be positive");
        Self {
            queue: VecDeque::with_capacity(max_len),
            max_len,
            slow_stride,
            last_t: None,
        }
    }

    pub fn shared(self) -> SharedCache {
        Arc::new(RwLock::new(self))
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Appends a frame and returns the frames evicted to respect `max_len`, oldest first.
    pub fn push_frame(&mut self, f: FrameRecord) -> Result<Vec<FrameRecord>, StreamError> {
        if let Some(prev) = self.last_t {
            if f.t_abs_ms < prev {
                return Err(StreamError::TimestampRegression {
                    prev,
                    got: f.t_abs_ms,
                });
            }
        }
        self.last_t = Some(f.t_abs_ms);
        self.queue.push_back(f);
        let mut evicted = Vec::new();
        while self.queue.len() > self.max_len {
            evicted.extend(self.queue.pop_front());
        }
        Ok(evicted)
    }

    /// Frames with `t >= since_ms`. Slow density keeps every `slow_stride`-th of them.
    pub fn window(&self, since_ms: i64, density: Density) -> Vec<FrameRecord> {
        let recent = self.queue.iter().filter(|f| f.t_abs_ms >= since_ms);
        match density {
            Density::Fast => recent.cloned().collect(),
            Density::Slow => recent.step_by(self.slow_stride).cloned().collect(),
        }
    }
}

/// Tiles the absolute timeline into `[start, start + chunk_ms)` chunks.
#[derive(Debug, Clone)]
pub struct Chunker {
    chunk_ms: i64,
    density: Density,
    next_id: u64,
    last_end: Option<i64>,
    pending: Vec<FrameRecord>,
}

impl Chunker {
    pub fn new(chunk_seconds: f64) -> Self {
        let chunk_ms = (chunk_seconds * 1000.0).round() as i64;
        assert!(chunk_ms > 0, "chunk duration must be positive");
        Self {
            chunk_ms,
            density: Density::Fast,
            next_id: 0,
            last_end: None,
            pending: Vec::new(),
        }
    }

    pub fn with_density(mut self, density: Density) -> Self {
        self.density = density;
        self
    }

    pub fn chunk_ms(&self) -> i64 {
        self.chunk_ms
    }

    /// Fixes the timeline origin. Ignored once the origin is set.
    pub fn start_at(&mut self, origin_ms: i64) {
        if self.last_end.is_none() {
            self.last_end = Some(origin_ms);
        }
    }

    pub fn origin_set(&self) -> bool {
        self.last_end.is_some()
    }

    /// End of the last emitted chunk (or the origin).
    pub fn boundary(&self) -> Option<i64> {
        self.last_end
    }

    pub fn next_chunk_id(&self) -> u64 {
        self.next_id
    }

    /// Buffers a frame for the chunk that will contain it. Sets the origin on first use.
    pub fn push(&mut self, f: FrameRecord) -> Result<(), StreamError> {
        self.start_at(f.t_abs_ms);
        let boundary = self.last_end.unwrap_or(f.t_abs_ms);
        if f.t_abs_ms < boundary {
            return Err(StreamError::TimestampRegression {
                prev: boundary,
                got: f.t_abs_ms,
            });
        }
        self.pending.push(f);
        Ok(())
    }

    /// Emits the next full chunk when `now_ms` has reached its end.
    pub fn cut_chunk(&mut self, now_ms: i64) -> Option<Chunk> {
        let start = self.last_end?;
        let end = start + self.chunk_ms;
        if now_ms < end {
            return None;
        }
        Some(self.emit(start, end))
    }

    /// Emits the final partial chunk `[boundary, end_ms)` when it is non-empty in time.
    pub fn flush(&mut self, end_ms: i64) -> Option<Chunk> {
        let start = self.last_end?;
        if end_ms <= start {
            return None;
        }
        let end = end_ms.min(start + self.chunk_ms);
        Some(self.emit(start, end))
    }

    fn emit(&mut self, start: i64, end: i64) -> Chunk {
        let split = self.pending.partition_point(|f| f.t_abs_ms < end);
        let frames: Vec<FrameRecord> = self.pending.drain(..split).collect();
        let chunk = Chunk {
            chunk_id: self.next_id,
            start_ms: start,
            end_ms: end,
            frames,
            density: self.density,
        };
        self.next_id += 1;
        self.last_end = Some(end);
        chunk
    }
}
