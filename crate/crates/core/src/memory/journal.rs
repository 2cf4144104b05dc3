//! Append-only mutation log and forest rendering.
//!
//! Each line is one mutation: `{"op":"put","node":{...}}` carries a full node
//! snapshot, `{"op":"delete","node_id":N}` removes a node. Replaying the log
//! in order reproduces the store exactly.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{HmeParams, Level, MemoryError, MemoryNode, MemoryStore, NodeId, Result};
use crate::backend::Backend;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Mutation {
    Put { node: MemoryNode },
    Delete { node_id: NodeId },
}

impl Mutation {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("mutation serializes")
    }
}

pub fn write_mutations<W: Write>(out: &mut W, mutations: &[Mutation]) -> std::io::Result<()> {
    for m in mutations {
        writeln!(out, "{}", m.to_line())?;
    }
    Ok(())
}

impl MemoryStore {
    pub fn apply(&mut self, m: Mutation) {
        match m {
            Mutation::Put { node } => self.put(node),
            Mutation::Delete { node_id } => {
                self.nodes.remove(&node_id);
                if let Some(j) = self.journal.as_mut() {
                    j.push(Mutation::Delete { node_id });
                }
            }
        }
    }

    /// Rebuilds a store from a mutation log. Blank lines are ignored.
    pub fn replay<R: BufRead>(params: HmeParams, backend: Arc<dyn Backend>, log: R) -> Result<Self> {
        let mut store = MemoryStore::new(params, backend);
        for (i, line) in log.lines().enumerate() {
            let line = line.map_err(|e| MemoryError::Journal {
                line: i + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let m: Mutation = serde_json::from_str(&line).map_err(|e| MemoryError::Journal {
                line: i + 1,
                message: e.to_string(),
            })?;
            store.apply(m);
        }
        Ok(store)
    }

    /// Indented text view of the forest, events first, children in stored order.
    pub fn render_forest(&self) -> String {
        let mut out = String::new();
        let stats = self.stats();
        let _ = writeln!(
            out,
            "segments={} atomic_actions={} events={}",
            stats.segments, stats.atomic_actions, stats.events
        );
        for root in self.nodes.values().filter(|n| n.parent.is_none()) {
            self.render_node(&mut out, root, 0);
        }
        out
    }

    fn render_node(&self, out: &mut String, n: &MemoryNode, depth: usize) {
        let level = match n.level {
            Level::Segment => "segment",
            Level::AtomicAction => "atomic_action",
            Level::Event => "event",
        };
        let _ = write!(
            out,
            "{:indent$}{level} #{} [{}-{}] salience={:.4} s={:?}",
            "",
            n.node_id,
            n.start_ms,
            n.tau,
            n.salience,
            n.s,
            indent = depth * 2
        );
        if !n.c.is_empty() {
            let _ = write!(out, " c={:?}", n.c);
        }
        out.push('\n');
        for c in &n.children {
            if let Some(child) = self.nodes.get(c) {
                self.render_node(out, child, depth + 1);
            }
        }
    }
}
