//! Hierarchical multimodal memory.
//!
//! Every chunk that leaves the reasoning window is written as a *segment*
//! node. Segments are induced into *atomic actions* (semantic similarity plus
//! temporal continuity against the few most recent actions), and newly
//! created atomic actions are aggregated into *events* by scene similarity
//! against the most recent event. Aggregate nodes re-derive their summary,
//! detail, embedding and compressed feature centroid from their children on
//! every change.
//!
//! All agents write through [`MemoryStore::write_segment`] and read through
//! [`MemoryStore::retrieve`] / [`MemoryStore::view_nodes`]; an [`AgentView`]
//! is the only thing that differs between callers.

mod journal;
mod retrieve;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, TextEmbedding};
use crate::stream::{Chunk, Density, FrameRecord};
use crate::vector;

pub use journal::{write_mutations, Mutation};
pub use retrieve::{
    ExecPolicy, RetrievalCommand, RetrievalHit, RetrievalMode, RetrievalOutcome, Traversal,
};

pub type NodeId = u64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MemoryError {
    #[error("timestamp regression: segment ends at {got} ms, store already at {prev} ms")]
    TimestampRegression { prev: i64, got: i64 },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("unknown memory node {0}")]
    UnknownNode(NodeId),
    #[error("node {id} is a {found:?}, expected {expected:?}")]
    WrongLevel { id: NodeId, expected: Level, found: Level },
    #[error("node {0} already has a parent")]
    AlreadyLinked(NodeId),
    #[error("invalid retrieval command: {0}")]
    InvalidCommand(String),
    #[error("journal line {line}: {message}")]
    Journal { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, MemoryError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Segment,
    AtomicAction,
    Event,
}

/// Stand-in for the compressed clip: feature centroid plus the frames it covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedSegment {
    pub centroid: Vec<f64>,
    pub frame_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryNode {
    pub node_id: NodeId,
    pub level: Level,
    pub z: CompressedSegment,
    /// Summary.
    pub s: String,
    /// Detailed description.
    pub c: String,
    /// End time (absolute ms).
    pub tau: i64,
    pub start_ms: i64,
    pub emb: TextEmbedding,
    pub salience: f64,
    pub children: Vec<NodeId>,
    pub parent: Option<NodeId>,
    /// Tags the summary is derived from.
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmeParams {
    /// Weight of semantic similarity in segment→action compatibility.
    pub alpha: f64,
    /// Weight of temporal continuity in segment→action compatibility.
    pub beta: f64,
    pub action_threshold: f64,
    pub continuity_seconds: f64,
    pub event_threshold: f64,
    pub event_gap_seconds: f64,
    /// Segments compared against for write-time salience.
    pub salience_window: usize,
    /// Most recent atomic actions considered for a merge.
    pub merge_candidates: usize,
    pub batch_size: usize,
    /// Batches scored concurrently per retrieval wave.
    pub wave_batches: usize,
    pub hit_threshold: f64,
    pub prune_salience: f64,
}

impl Default for HmeParams {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 0.3,
            action_threshold: 0.6,
            continuity_seconds: 30.0,
            event_threshold: 0.5,
            event_gap_seconds: 10.0,
            salience_window: 5,
            merge_candidates: 3,
            batch_size: 8,
            wave_batches: 1,
            hit_threshold: 0.8,
            prune_salience: 0.05,
        }
    }
}

impl HmeParams {
    /// Segment→action compatibility: `α·cos + β·exp(−Δt/τc)`.
    pub fn compatibility(&self, cosine: f64, gap_ms: i64) -> f64 {
        let dt = gap_ms.max(0) as f64 / 1000.0;
        self.alpha * cosine + self.beta * (-dt / self.continuity_seconds).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Reasoning,
    Proactivity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentView {
    pub agent: AgentKind,
    pub levels: Vec<Level>,
}

impl AgentView {
    pub fn reasoning() -> Self {
        Self {
            agent: AgentKind::Reasoning,
            levels: vec![Level::AtomicAction, Level::Event],
        }
    }

    pub fn proactivity() -> Self {
        Self {
            agent: AgentKind::Proactivity,
            levels: vec![Level::Segment, Level::AtomicAction],
        }
    }

    pub fn for_agent(agent: AgentKind) -> Self {
        match agent {
            AgentKind::Reasoning => Self::reasoning(),
            AgentKind::Proactivity => Self::proactivity(),
        }
    }

    pub fn sees(&self, level: Level) -> bool {
        self.levels.contains(&level)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryStats {
    pub segments: usize,
    pub atomic_actions: usize,
    pub events: usize,
}

pub struct MemoryStore {
    params: HmeParams,
    backend: Arc<dyn Backend>,
    nodes: BTreeMap<NodeId, MemoryNode>,
    next_id: NodeId,
    last_tau: Option<i64>,
    journal: Option<Vec<Mutation>>,
}

impl std::fmt::Debug for MemoryStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryStore")
            .field("nodes", &self.nodes.len())
            .field("next_id", &self.next_id)
            .finish()
    }
}

impl MemoryStore {
    pub fn new(params: HmeParams, backend: Arc<dyn Backend>) -> Self {
        Self {
            params,
            backend,
            nodes: BTreeMap::new(),
            next_id: 0,
            last_tau: None,
            journal: None,
        }
    }

    /// Records every mutation for [`MemoryStore::drain_journal`].
    pub fn with_journal(mut self) -> Self {
        self.journal = Some(Vec::new());
        self
    }

    pub fn params(&self) -> &HmeParams {
        &self.params
    }

    pub fn node(&self, id: NodeId) -> Option<&MemoryNode> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &MemoryNode> {
        self.nodes.values()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Ids of one level in creation order.
    pub fn ids_at(&self, level: Level) -> Vec<NodeId> {
        self.nodes.values().filter(|n| n.level == level).map(|n| n.node_id).collect()
    }

    pub fn stats(&self) -> MemoryStats {
        let mut s = MemoryStats::default();
        for n in self.nodes.values() {
            match n.level {
                Level::Segment => s.segments += 1,
                Level::AtomicAction => s.atomic_actions += 1,
                Level::Event => s.events += 1,
            }
        }
        s
    }

    fn require(&self, id: NodeId, level: Level) -> Result<&MemoryNode> {
        let n = self.nodes.get(&id).ok_or(MemoryError::UnknownNode(id))?;
        if n.level != level {
            return Err(MemoryError::WrongLevel {
                id,
                expected: level,
                found: n.level,
            });
        }
        Ok(n)
    }

    fn put(&mut self, node: MemoryNode) {
        if let Some(j) = self.journal.as_mut() {
            j.push(Mutation::Put { node: node.clone() });
        }
        self.next_id = self.next_id.max(node.node_id + 1);
        if node.level == Level::Segment {
            self.last_tau = Some(self.last_tau.map_or(node.tau, |t| t.max(node.tau)));
        }
        self.nodes.insert(node.node_id, node);
    }

    fn alloc(&mut self) -> NodeId {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    /// Writes a chunk as a segment node and runs hierarchical evolution on it.
    pub fn write_segment(&mut self, chunk: &Chunk, s: &str, c_detail: &str) -> Result<NodeId> {
        if let Some(prev) = self.last_tau {
            if chunk.end_ms < prev {
                return Err(MemoryError::TimestampRegression { prev, got: chunk.end_ms });
            }
        }
        let emb = self.backend.embed_text(s)?;
        let salience = self.write_salience(&emb);
        let mut labels = chunk.distinct_labels();
        if labels.is_empty() && !s.is_empty() {
            labels.push(s.to_string());
        }
        let id = self.alloc();
        self.put(MemoryNode {
            node_id: id,
            level: Level::Segment,
            z: CompressedSegment {
                centroid: vector::mean(chunk.frames.iter().map(|f| f.feat.as_slice())),
                frame_ids: chunk.frames.iter().map(|f| f.frame_id).collect(),
            },
            s: s.to_string(),
            c: c_detail.to_string(),
            tau: chunk.end_ms,
            start_ms: chunk.start_ms,
            emb,
            salience,
            children: Vec::new(),
            parent: None,
            labels,
        });
        let (action, created) = self.induce_atomic_action(id)?;
        if created {
            self.aggregate_event(action)?;
        } else if let Some(event) = self.nodes[&action].parent {
            self.refresh(event)?;
        }
        Ok(id)
    }

    /// `1 − max cos` against the last K segments, clamped to `[0, 1]`.
    fn write_salience(&self, emb: &TextEmbedding) -> f64 {
        if vector::is_zero(emb.as_slice()) {
            return 1.0;
        }
        let recent: Vec<&MemoryNode> = self
            .nodes
            .values()
            .rev()
            .filter(|n| n.level == Level::Segment)
            .take(self.params.salience_window)
            .collect();
        if recent.is_empty() {
            return 1.0;
        }
        let best = recent.iter().map(|n| emb.cosine(&n.emb)).fold(f64::NEG_INFINITY, f64::max);
        (1.0 - best).clamp(0.0, 1.0)
    }

    /// Merges the segment into the first of the most recent atomic actions
    /// (newest first) whose compatibility reaches the threshold, otherwise
    /// wraps it in a new atomic action.
    pub fn induce_atomic_action(&mut self, seg_id: NodeId) -> Result<(NodeId, bool)> {
        let seg = self.require(seg_id, Level::Segment)?;
        if seg.parent.is_some() {
            return Err(MemoryError::AlreadyLinked(seg_id));
        }
        let target = self
            .nodes
            .values()
            .rev()
            .filter(|n| n.level == Level::AtomicAction)
            .take(self.params.merge_candidates)
            .find(|a| {
                let cos = seg.emb.cosine(&a.emb);
                self.params.compatibility(cos, seg.start_ms - a.tau) >= self.params.action_threshold
            })
            .map(|a| a.node_id);
        self.attach(seg_id, target, Level::AtomicAction)
    }

    /// Merges a fresh atomic action into the most recent event when the scene
    /// centroids agree and the gap is short enough, otherwise opens a new event.
    pub fn aggregate_event(&mut self, action_id: NodeId) -> Result<(NodeId, bool)> {
        let action = self.require(action_id, Level::AtomicAction)?;
        if action.parent.is_some() {
            return Err(MemoryError::AlreadyLinked(action_id));
        }
        let gap_limit = (self.params.event_gap_seconds * 1000.0).round() as i64;
        let target = self
            .nodes
            .values()
            .rev()
            .find(|n| n.level == Level::Event)
            .filter(|ev| {
                let scene = vector::cosine(&action.z.centroid, &ev.z.centroid);
                scene >= self.params.event_threshold && action.start_ms - ev.tau <= gap_limit
            })
            .map(|ev| ev.node_id);
        self.attach(action_id, target, Level::Event)
    }

    fn attach(&mut self, child: NodeId, target: Option<NodeId>, level: Level) -> Result<(NodeId, bool)> {
        let (parent, created) = match target {
            Some(p) => (p, false),
            None => {
                let id = self.alloc();
                let template = &self.nodes[&child];
                let shell = MemoryNode {
                    node_id: id,
                    level,
                    z: CompressedSegment {
                        centroid: vector::zeros(),
                        frame_ids: Vec::new(),
                    },
                    s: String::new(),
                    c: String::new(),
                    tau: template.tau,
                    start_ms: template.start_ms,
                    emb: TextEmbedding::zero(),
                    salience: 0.0,
                    children: Vec::new(),
                    parent: None,
                    labels: Vec::new(),
                };
                self.nodes.insert(id, shell);
                (id, true)
            }
        };
        if let Some(p) = self.nodes.get_mut(&parent) {
            p.children.push(child);
        }
        let mut c = self.nodes[&child].clone();
        c.parent = Some(parent);
        self.put(c);
        self.refresh(parent)?;
        Ok((parent, created))
    }

    /// Re-derives an aggregate node from its children.
    fn refresh(&mut self, id: NodeId) -> Result<()> {
        let mut node = self.nodes.get(&id).cloned().ok_or(MemoryError::UnknownNode(id))?;
        let mut children: Vec<&MemoryNode> = node.children.iter().filter_map(|c| self.nodes.get(c)).collect();
        children.sort_by_key(|c| (c.tau, c.node_id));
        node.children = children.iter().map(|c| c.node_id).collect();
        node.start_ms = children.iter().map(|c| c.start_ms).min().unwrap_or(node.start_ms);
        node.tau = children.iter().map(|c| c.tau).max().unwrap_or(node.tau);

        let mut labels: Vec<String> = Vec::new();
        for c in &children {
            for l in &c.labels {
                if !labels.contains(l) {
                    labels.push(l.clone());
                }
            }
        }
        node.labels = labels;

        let synthetic = Chunk {
            chunk_id: id,
            start_ms: node.start_ms,
            end_ms: node.tau,
            frames: children
                .iter()
                .map(|c| FrameRecord {
                    frame_id: c.node_id,
                    t_abs_ms: c.tau,
                    feat: c.z.centroid.clone(),
                    labels: c.labels.clone(),
                    summary: Some(c.c.clone()),
                })
                .collect(),
            density: Density::Fast,
        };
        let caption = self.backend.caption_chunk(&synthetic)?;

        let total: usize = children.iter().map(|c| c.z.frame_ids.len()).sum();
        let mut centroid = vector::zeros();
        if total > 0 {
            for c in &children {
                let w = c.z.frame_ids.len() as f64;
                for (acc, x) in centroid.iter_mut().zip(&c.z.centroid) {
                    *acc += x * w;
                }
            }
            for acc in centroid.iter_mut() {
                *acc /= total as f64;
            }
        }
        node.z = CompressedSegment {
            centroid,
            frame_ids: children.iter().flat_map(|c| c.z.frame_ids.iter().copied()).collect(),
        };
        node.salience = children.iter().map(|c| c.salience).fold(0.0, f64::max);
        node.emb = self.backend.embed_text(&caption.summary)?;
        node.s = caption.summary;
        node.c = caption.detail;
        self.put(node);
        Ok(())
    }

    /// Drops low-salience segments from atomic actions that have at least two
    /// children. Each action keeps at least its newest child. Never called
    /// automatically.
    pub fn prune_by_salience(&mut self) -> Vec<NodeId> {
        let threshold = self.params.prune_salience;
        let mut removed = Vec::new();
        for action in self.ids_at(Level::AtomicAction) {
            let children = self.nodes[&action].children.clone();
            if children.len() < 2 {
                continue;
            }
            let newest = *children.last().expect("non-empty");
            let drop: Vec<NodeId> = children
                .iter()
                .copied()
                .filter(|c| *c != newest && self.nodes[c].salience < threshold)
                .collect();
            if drop.is_empty() {
                continue;
            }
            for d in &drop {
                self.nodes.remove(d);
                if let Some(j) = self.journal.as_mut() {
                    j.push(Mutation::Delete { node_id: *d });
                }
            }
            let mut a = self.nodes[&action].clone();
            a.children.retain(|c| !drop.contains(c));
            self.put(a);
            removed.extend(drop);
        }
        removed.sort_unstable();
        removed
    }

    /// Visible nodes overlapping `[since_ms, until_ms]`, ascending by end time.
    pub fn view_nodes(&self, view: &AgentView, since_ms: i64, until_ms: i64) -> Vec<MemoryNode> {
        let mut out: Vec<MemoryNode> = self
            .nodes
            .values()
            .filter(|n| view.sees(n.level) && n.start_ms <= until_ms && n.tau >= since_ms)
            .cloned()
            .collect();
        out.sort_by_key(|n| (n.tau, n.node_id));
        out
    }

    pub fn drain_journal(&mut self) -> Vec<Mutation> {
        self.journal.as_mut().map(std::mem::take).unwrap_or_default()
    }
}
