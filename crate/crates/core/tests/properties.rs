use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use proptest::prelude::*;
use streamclaw_core::backend::{embed_bag, MockBackend, Modality};
use streamclaw_core::kv::{KvWindow, PruneConfig, VisualToken};
use streamclaw_core::memory::{AgentView, HmeParams, Level, MemoryStore, RetrievalCommand, RetrievalMode, Traversal};
use streamclaw_core::stream::{Chunk, Chunker, Density, FrameRecord, SharedStreamCache};
use streamclaw_core::vector::{self, DIM};

fn feat(seed: &[i8]) -> Vec<f64> {
    let mut v = vector::zeros();
    for (i, x) in seed.iter().enumerate() {
        v[i % DIM] += *x as f64;
    }
    v
}

const WORDS: &[&str] = &["car", "road", "person", "dog", "walks", "sits", "red", "light", "door", "opens"];

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(0..WORDS.len(), 1..4).prop_map(|ix| ix.iter().map(|i| WORDS[*i]).collect::<Vec<_>>().join(" "))
}

proptest! {
    #[test]
    fn cache_is_a_bounded_fifo(max_len in 1usize..20, gaps in prop::collection::vec(0i64..50, 0..80)) {
        let mut cache = SharedStreamCache::new(max_len, 3);
        let mut t = 0;
        let mut all = Vec::new();
        for (i, g) in gaps.iter().enumerate() {
            t += g;
            let f = FrameRecord::new(i as u64, t, None).unwrap();
            all.push(f.clone());
            let evicted = cache.push_frame(f).unwrap();
            prop_assert!(cache.len() <= max_len);
            prop_assert!(evicted.len() <= 1);
        }
        let kept: Vec<u64> = cache.window(i64::MIN, Density::Fast).iter().map(|f| f.frame_id).collect();
        let expect: Vec<u64> = all.iter().rev().take(max_len).rev().map(|f| f.frame_id).collect();
        prop_assert_eq!(kept, expect);
    }

    #[test]
    fn chunks_tile_the_timeline(chunk_ms in 1i64..3000, origin in 0i64..10_000, gaps in prop::collection::vec(0i64..2500, 1..60)) {
        let mut ch = Chunker::new(chunk_ms as f64 / 1000.0);
        ch.start_at(origin);
        let mut chunks: Vec<Chunk> = Vec::new();
        let mut t = origin;
        let mut n = 0;
        for (i, g) in gaps.iter().enumerate() {
            t += g;
            while let Some(c) = ch.cut_chunk(t) {
                chunks.push(c);
            }
            ch.push(FrameRecord::new(i as u64, t, None).unwrap()).unwrap();
            n += 1;
        }
        chunks.extend(ch.flush(t + 1));
        prop_assert_eq!(chunks[0].start_ms, origin);
        for w in chunks.windows(2) {
            prop_assert_eq!(w[0].end_ms, w[1].start_ms);
            prop_assert_eq!(w[0].chunk_id + 1, w[1].chunk_id);
        }
        let mut frames = 0;
        for c in &chunks {
            prop_assert!(c.end_ms > c.start_ms);
            for f in &c.frames {
                prop_assert!(c.start_ms <= f.t_abs_ms && f.t_abs_ms < c.end_ms);
            }
            frames += c.frames.len();
        }
        prop_assert_eq!(frames, n);
    }

    #[test]
    fn text_embeddings_are_unit_or_zero(s in ".{0,40}") {
        let e = embed_bag(&s);
        prop_assert_eq!(e.len(), DIM);
        let n = vector::norm(&e);
        prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-9);
        prop_assert_eq!(e, embed_bag(&s));
    }

    #[test]
    fn kv_prune_and_slide_invariants(
        p in 1.0f64..=100.0,
        keys in prop::collection::vec(prop::collection::vec(-3i8..4, 1..6), 1..40),
        scores in prop::collection::vec(0.0f64..1.0, 40),
        texts in 0usize..4,
        now in 0i64..60_000,
    ) {
        let cfg = PruneConfig { p_percent: p, redundancy_threshold: 0.95, window_seconds: 20.0, layers: vec![] };
        let mut kv = KvWindow::new(cfg.clone()).unwrap();
        let tokens: Vec<VisualToken> = keys.iter().enumerate().map(|(i, k)| VisualToken {
            key: feat(k), value: feat(k), write_ms: i as i64 * 1000,
        }).collect();
        let out = kv.write_visual_tokens(tokens);
        prop_assert_eq!(out.written + out.skipped, keys.len());
        for i in 0..texts {
            kv.write_textual(vector::zeros(), vector::zeros(), i as i64);
        }
        let visual: Vec<u64> = kv.entries().iter().filter(|e| e.modality == Modality::Visual).map(|e| e.entry_id).collect();
        let attn: BTreeMap<u64, f64> = visual.iter().zip(&scores).map(|(id, s)| (*id, *s)).collect();
        kv.apply_attention(&attn).unwrap();
        let n = visual.len();
        kv.prune_top_p();
        prop_assert_eq!(kv.visual_count(), cfg.retained(n));
        prop_assert_eq!(kv.len() - kv.visual_count(), texts);
        let before = kv.entries().to_vec();
        kv.prune_top_p();
        prop_assert_eq!(kv.entries(), &before[..]);
        kv.slide_window(now);
        prop_assert!(kv.entries().iter().all(|e| e.write_ms >= now - cfg.window_ms()));
    }

    #[test]
    fn hierarchy_is_sound(
        steps in prop::collection::vec((sentence(), 1i64..20_000, prop::collection::vec(-2i8..3, 1..4)), 1..40),
    ) {
        let mut store = MemoryStore::new(HmeParams::default(), Arc::new(MockBackend::new())).with_journal();
        let mut t = 0;
        for (i, (s, len, f)) in steps.iter().enumerate() {
            let frame = FrameRecord::new(i as u64, t, Some(feat(f))).unwrap().with_summary(s.clone());
            let c = Chunk { chunk_id: i as u64, start_ms: t, end_ms: t + len, frames: vec![frame], density: Density::Fast };
            store.write_segment(&c, s, s).unwrap();
            t += len;
        }
        for n in store.nodes() {
            prop_assert!((0.0..=1.0).contains(&n.salience));
            prop_assert!(n.start_ms <= n.tau);
            let expected_parent = match n.level {
                Level::Segment => Some(Level::AtomicAction),
                Level::AtomicAction => Some(Level::Event),
                Level::Event => None,
            };
            match (n.parent, expected_parent) {
                (Some(pid), Some(level)) => {
                    let p = store.node(pid).unwrap();
                    prop_assert_eq!(p.level, level);
                    prop_assert!(p.children.contains(&n.node_id));
                    prop_assert!(p.start_ms <= n.start_ms && n.tau <= p.tau);
                }
                (None, None) => {}
                (got, want) => prop_assert!(false, "node {} parent {:?} expected level {:?}", n.node_id, got, want),
            }
            for c in &n.children {
                prop_assert_eq!(store.node(*c).unwrap().parent, Some(n.node_id));
            }
            if n.level != Level::Segment {
                let sal = n.children.iter().map(|c| store.node(*c).unwrap().salience).fold(0.0, f64::max);
                prop_assert_eq!(n.salience, sal);
            }
        }
        let stats = store.stats();
        prop_assert_eq!(stats.segments, steps.len());
        prop_assert!(stats.events <= stats.atomic_actions && stats.atomic_actions <= stats.segments);

        let log = store.drain_journal();
        let mut text = Vec::new();
        streamclaw_core::memory::write_mutations(&mut text, &log).unwrap();
        let replayed = MemoryStore::replay(HmeParams::default(), Arc::new(MockBackend::new()), &text[..]).unwrap();
        prop_assert_eq!(replayed.render_forest(), store.render_forest());
        prop_assert_eq!(replayed.nodes().cloned().collect::<Vec<_>>(), store.nodes().cloned().collect::<Vec<_>>());
    }

    #[test]
    fn retrieval_is_bounded_and_ranked(
        summaries in prop::collection::vec(sentence(), 1..30),
        query in sentence(),
        top_k in 1usize..5,
        extra in 0usize..10,
        traversal in prop_oneof![Just(Traversal::Forward), Just(Traversal::Reverse), Just(Traversal::SalienceFirst)],
    ) {
        let mut store = MemoryStore::new(HmeParams::default(), Arc::new(MockBackend::new()));
        for (i, s) in summaries.iter().enumerate() {
            let t = i as i64 * 60_000;
            let c = Chunk { chunk_id: i as u64, start_ms: t, end_ms: t + 2000, frames: vec![], density: Density::Fast };
            store.write_segment(&c, s, "").unwrap();
        }
        let cmd = RetrievalCommand {
            query,
            mode: RetrievalMode::SingleFact,
            traversal,
            budget: top_k + extra,
            top_k,
            hit_threshold: 0.8,
        };
        let out = store.retrieve(&cmd, &AgentView::reasoning()).unwrap();
        prop_assert!(out.hits.len() <= top_k);
        prop_assert!(out.scored <= cmd.budget);
        for w in out.hits.windows(2) {
            prop_assert!(w[0].relevance >= w[1].relevance);
        }
        let ids: BTreeSet<u64> = out.hits.iter().map(|h| h.node_id).collect();
        prop_assert_eq!(ids.len(), out.hits.len());
    }
}
