//! Command-driven retrieval.
//!
//! Candidates are ordered by the requested traversal, capped at the budget,
//! and scored in waves. A wave holds `wave_batches` batches of `batch_size`
//! candidates; batches inside a wave are scored on scoped threads. Single-fact
//! commands stop after the first wave that contains a hit.

use std::cmp::Ordering;
use std::thread;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AgentView, MemoryError, MemoryStore, NodeId, Result};
use crate::backend::TextEmbedding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    SingleFact,
    Temporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Traversal {
    Forward,
    Reverse,
    SalienceFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCommand {
    pub query: String,
    pub mode: RetrievalMode,
    pub traversal: Traversal,
    pub budget: usize,
    pub top_k: usize,
    /// Values above 1 disable early stopping.
    pub hit_threshold: f64,
}

impl RetrievalCommand {
    pub fn validate(&self) -> Result<()> {
        if self.top_k < 1 {
            return Err(MemoryError::InvalidCommand("top_k must be at least 1".into()));
        }
        if self.budget < self.top_k {
            return Err(MemoryError::InvalidCommand(format!(
                "budget {} is smaller than top_k {}",
                self.budget, self.top_k
            )));
        }
        if !(self.hit_threshold >= 0.0) {
            return Err(MemoryError::InvalidCommand("hit_threshold must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub node_id: NodeId,
    pub relevance: f64,
    pub s: String,
    pub c: String,
    pub start_ms: i64,
    pub tau: i64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalOutcome {
    pub hits: Vec<RetrievalHit>,
    /// Candidates whose relevance was computed.
    pub scored: usize,
    pub waves: usize,
}

/// Scheduling knobs for tests: a seed randomizes batch spawn order, the
/// order inside each batch, and adds jitter before scoring.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExecPolicy {
    pub shuffle_seed: Option<u64>,
}

struct Candidate<'a> {
    node_id: NodeId,
    emb: &'a TextEmbedding,
    salience: f64,
    tau: i64,
}

/// `(relevance desc, tau asc, node_id asc)`.
fn rank(a: &RetrievalHit, b: &RetrievalHit) -> Ordering {
    b.relevance
        .total_cmp(&a.relevance)
        .then(a.tau.cmp(&b.tau))
        .then(a.node_id.cmp(&b.node_id))
}

fn score_batch(q: &TextEmbedding, batch: &[(usize, &Candidate<'_>)], seed: Option<u64>) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..batch.len()).collect();
    if let Some(seed) = seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        for _ in 0..rng.gen_range(0..4) {
            thread::yield_now();
        }
    }
    order.into_iter().map(|i| (batch[i].0, q.cosine(batch[i].1.emb))).collect()
}

impl MemoryStore {
    pub fn retrieve(&self, cmd: &RetrievalCommand, view: &AgentView) -> Result<RetrievalOutcome> {
        self.retrieve_with(cmd, view, ExecPolicy::default())
    }

    pub fn retrieve_with(&self, cmd: &RetrievalCommand, view: &AgentView, exec: ExecPolicy) -> Result<RetrievalOutcome> {
        cmd.validate()?;
        let q = self.backend.embed_text(&cmd.query)?;

        let mut candidates: Vec<Candidate<'_>> = self
            .nodes
            .values()
            .filter(|n| view.sees(n.level))
            .map(|n| Candidate {
                node_id: n.node_id,
                emb: &n.emb,
                salience: n.salience,
                tau: n.tau,
            })
            .collect();
        match cmd.traversal {
            Traversal::Forward => candidates.sort_by(|a, b| a.tau.cmp(&b.tau).then(a.node_id.cmp(&b.node_id))),
            Traversal::Reverse => candidates.sort_by(|a, b| b.tau.cmp(&a.tau).then(b.node_id.cmp(&a.node_id))),
            Traversal::SalienceFirst => candidates.sort_by(|a, b| {
                b.salience
                    .total_cmp(&a.salience)
                    .then(b.tau.cmp(&a.tau))
                    .then(b.node_id.cmp(&a.node_id))
            }),
        }
        candidates.truncate(cmd.budget);

        let batch = self.params.batch_size.max(1);
        let wave = batch * self.params.wave_batches.max(1);
        let mut relevance: Vec<Option<f64>> = vec![None; candidates.len()];
        let mut rng = exec.shuffle_seed.map(ChaCha8Rng::seed_from_u64);
        let mut outcome = RetrievalOutcome::default();

        let indexed: Vec<(usize, &Candidate<'_>)> = candidates.iter().enumerate().collect();
        for wave_items in indexed.chunks(wave) {
            let mut batches: Vec<&[(usize, &Candidate<'_>)]> = wave_items.chunks(batch).collect();
            let seeds: Vec<Option<u64>> = match rng.as_mut() {
                Some(r) => {
                    batches.shuffle(r);
                    batches.iter().map(|_| Some(r.gen())).collect()
                }
                None => vec![None; batches.len()],
            };
            let scored: Vec<(usize, f64)> = if batches.len() == 1 {
                score_batch(&q, batches[0], seeds[0])
            } else {
                thread::scope(|s| {
                    let handles: Vec<_> = batches
                        .iter()
                        .zip(&seeds)
                        .map(|(b, seed)| {
                            let q = &q;
                            s.spawn(move || score_batch(q, b, *seed))
                        })
                        .collect();
                    handles
                        .into_iter()
                        .flat_map(|h| h.join().expect("scoring thread panicked"))
                        .collect()
                })
            };
            let mut hit = false;
            for (i, r) in scored {
                hit |= r >= cmd.hit_threshold;
                relevance[i] = Some(r);
            }
            outcome.scored += wave_items.len();
            outcome.waves += 1;
            if hit && cmd.mode == RetrievalMode::SingleFact {
                break;
            }
        }

        let mut hits: Vec<RetrievalHit> = candidates
            .iter()
            .zip(&relevance)
            .filter_map(|(c, r)| {
                let r = (*r)?;
                let n = &self.nodes[&c.node_id];
                Some(RetrievalHit {
                    node_id: n.node_id,
                    relevance: r,
                    s: n.s.clone(),
                    c: n.c.clone(),
                    start_ms: n.start_ms,
                    tau: n.tau,
                })
            })
            .collect();
        hits.sort_by(rank);
        hits.truncate(cmd.top_k);
        outcome.hits = hits;
        Ok(outcome)
    }
}
