//! One reasoning session over one stream.
//!
//! A [`Session`] is driven by timed inputs. Whenever the clock crosses a chunk
//! boundary the chunk runs through a fixed pipeline: clock update, visual KV
//! write, proactive check, query routing, decode with attention pruning, and
//! window slide with memory offload. Every externally visible result is an
//! [`OutEvent`].

pub mod route;

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::backend::{Backend, BackendError, Caption, GenerateRequest, Purpose, QueryClass};
use crate::config::RuntimeConfig;
use crate::kv::{KvError, KvWindow, VisualToken};
use crate::memory::{MemoryStats, MemoryStore, Mutation};
use crate::proactive::{ProactiveEngine, ProactiveError, ProactiveSignal, ReminderKind, ReminderNode};
use crate::scenario::TimedEvent;
use crate::stream::{Chunk, Chunker, Density, FrameRecord, SharedCache, SharedStreamCache, StreamError};
use crate::tools::skills::{run_plain_handler, validate_call};
use crate::tools::{
    call_memory, number_arg, run_agentic_loop, string_arg, video_cut, FrameArchive, SkillError, SkillRegistry,
    ToolCall, ToolError, ToolRegistry,
};

pub use route::{clip_call, describe_window, match_intent, rewrite_memory_query};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SessionError {
    #[error("chunk gap: expected chunk {expected}, got {got}")]
    ChunkGap { expected: u64, got: u64 },
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Skill(#[from] SkillError),
    #[error(transparent)]
    Proactive(#[from] ProactiveError),
    #[error("session already finished")]
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Answer,
    Proactive,
    ToolResult,
    SkillExec,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutEvent {
    pub kind: EventKind,
    pub t_abs_ms: i64,
    pub query_id: Option<u64>,
    pub text: String,
    pub payload: Value,
}

impl OutEvent {
    fn new(kind: EventKind, t_abs_ms: i64, query_id: Option<u64>, text: impl Into<String>, payload: Value) -> Self {
        Self {
            kind,
            t_abs_ms,
            query_id,
            text: text.into(),
            payload,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Clock,
    WriteVisual,
    Proactive,
    Queries,
    Decode,
    Slide,
}

/// Per-chunk record of what the pipeline did.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChunkTrace {
    pub chunk_id: u64,
    pub start_ms: i64,
    pub end_ms: i64,
    pub frames: usize,
    pub steps: Vec<Step>,
    pub written: usize,
    pub skipped: usize,
    pub decode_steps: usize,
    pub visual_before_prune: usize,
    pub visual_after_prune: usize,
    pub offloaded: usize,
    pub memory_writes: usize,
    /// Oldest KV write time after the slide.
    pub oldest_entry_ms: Option<i64>,
}

/// Which path a query took and which services it touched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub query_id: u64,
    pub class: QueryClass,
    pub memory_calls: usize,
    pub proactive_calls: usize,
}

/// Memory and cache sizes reported to clients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsView {
    pub t_abs_ms: i64,
    pub segments: usize,
    pub atomic_actions: usize,
    pub events: usize,
    pub kv_visual_count: usize,
}

/// Everything a live client sees, in emission order.
#[derive(Debug, Clone, PartialEq)]
pub enum FeedItem {
    ChunkMeta(ChunkTrace),
    Signal(ProactiveSignal),
    Event(OutEvent),
    MemoryStats(StatsView),
}

#[derive(Debug, Clone)]
struct PendingQuery {
    query_id: u64,
    text: String,
    t_abs_ms: i64,
}

/// A chunk waiting to leave the window and be written to memory.
#[derive(Debug, Clone)]
struct PendingRecord {
    chunk: Chunk,
    caption: Caption,
    /// `(function, text)` of skill calls made while this chunk was current.
    notes: Vec<(String, String)>,
}

pub struct Session {
    cfg: RuntimeConfig,
    backend: Arc<dyn Backend>,
    cache: SharedCache,
    chunker: Chunker,
    kv: KvWindow,
    memory: MemoryStore,
    proactive: ProactiveEngine,
    skills: Arc<SkillRegistry>,
    tools: ToolRegistry,
    archive: FrameArchive,
    source: String,
    now_ms: i64,
    finished: bool,
    pending_queries: VecDeque<PendingQuery>,
    next_query_id: u64,
    pending_records: VecDeque<PendingRecord>,
    window: Caption,
    transcript: Vec<OutEvent>,
    signals: Vec<ProactiveSignal>,
    traces: Vec<ChunkTrace>,
    routes: Vec<RouteRecord>,
    memory_calls: usize,
    proactive_calls: usize,
    feed: Option<Vec<FeedItem>>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("backend", &self.backend.name())
            .field("source", &self.source)
            .field("now_ms", &self.now_ms)
            .field("events", &self.transcript.len())
            .finish()
    }
}

impl Session {
    /// Builds a session and arms the label triggers of every skill in `skills.load`.
    pub fn new(cfg: RuntimeConfig, backend: Arc<dyn Backend>, source: &str) -> Result<Self, SessionError> {
        let skills = match &cfg.skills.dir {
            Some(dir) => SkillRegistry::discover(dir.clone())?,
            None => SkillRegistry::empty(),
        };
        let mut proactive = ProactiveEngine::new(cfg.proactive.clone(), backend.clone())?;
        for name in &cfg.skills.load {
            let m = skills.load_skill(name)?;
            let labels = m.trigger_labels();
            if labels.is_empty() {
                proactive.register_token(&m.token)?;
            } else {
                proactive.register_skill_trigger(&m.name, &m.token, &labels, &format!("{}: {{labels}}", m.name))?;
            }
        }
        Ok(Self {
            cache: SharedStreamCache::new(cfg.cache_max_frames, cfg.slow_stride).shared(),
            chunker: Chunker::new(cfg.chunk_seconds),
            kv: KvWindow::new(cfg.kv.clone())?,
            memory: MemoryStore::new(cfg.memory.clone(), backend.clone()),
            proactive,
            skills: Arc::new(skills),
            tools: ToolRegistry::builtin(),
            archive: FrameArchive::new(),
            source: source.to_string(),
            now_ms: 0,
            finished: false,
            pending_queries: VecDeque::new(),
            next_query_id: 0,
            pending_records: VecDeque::new(),
            window: Caption::default(),
            transcript: Vec::new(),
            signals: Vec::new(),
            traces: Vec::new(),
            routes: Vec::new(),
            memory_calls: 0,
            proactive_calls: 0,
            feed: None,
            backend,
            cfg,
        })
    }

    /// Records every memory mutation for [`Self::drain_memory_log`].
    pub fn with_memory_journal(mut self) -> Self {
        self.memory = MemoryStore::new(self.cfg.memory.clone(), self.backend.clone()).with_journal();
        self
    }

    /// Collects [`FeedItem`]s for [`Self::drain_feed`].
    pub fn with_feed(mut self) -> Self {
        self.feed = Some(Vec::new());
        self
    }

    pub fn drain_feed(&mut self) -> Vec<FeedItem> {
        self.feed.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn emit(&mut self, item: FeedItem) {
        if let Some(f) = self.feed.as_mut() {
            f.push(item);
        }
    }

    fn record(&mut self, ev: &OutEvent) {
        self.transcript.push(ev.clone());
        self.emit(FeedItem::Event(ev.clone()));
    }

    pub fn stats_view(&self) -> StatsView {
        let m = self.memory.stats();
        StatsView {
            t_abs_ms: self.now_ms,
            segments: m.segments,
            atomic_actions: m.atomic_actions,
            events: m.events,
            kv_visual_count: self.kv.visual_count(),
        }
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.cfg
    }

    pub fn now_ms(&self) -> i64 {
        self.now_ms
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn cache(&self) -> &SharedCache {
        &self.cache
    }

    pub fn kv(&self) -> &KvWindow {
        &self.kv
    }

    pub fn memory(&self) -> &MemoryStore {
        &self.memory
    }

    pub fn memory_stats(&self) -> MemoryStats {
        self.memory.stats()
    }

    pub fn proactive(&self) -> &ProactiveEngine {
        &self.proactive
    }

    pub fn skills(&self) -> &SkillRegistry {
        &self.skills
    }

    pub fn transcript(&self) -> &[OutEvent] {
        &self.transcript
    }

    /// Every proactive signal, silent ones included.
    pub fn signals(&self) -> &[ProactiveSignal] {
        &self.signals
    }

    pub fn traces(&self) -> &[ChunkTrace] {
        &self.traces
    }

    pub fn routes(&self) -> &[RouteRecord] {
        &self.routes
    }

    /// End of the chunk currently being filled, once the origin is set.
    pub fn next_chunk_end(&self) -> Option<i64> {
        self.chunker.boundary().map(|b| b + self.chunker.chunk_ms())
    }

    pub fn pending_queries(&self) -> usize {
        self.pending_queries.len()
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn drain_memory_log(&mut self) -> Vec<Mutation> {
        self.memory.drain_journal()
    }

    /// Context text handed to the decoder. The last line is the window caption.
    pub fn build_prompt(&self) -> String {
        let skills: Vec<String> = self
            .skills
            .summaries()
            .iter()
            .map(|s| format!("{}: {}", s.name, s.description))
            .collect();
        format!("NOW_ABS_MS={}\nSKILLS:{}\nWINDOW:{}", self.now_ms, skills.join("; "), self.window.summary)
    }

    fn ensure_origin(&mut self, t: i64) {
        if !self.chunker.origin_set() {
            self.chunker.start_at(t);
            self.archive.add_source(&self.source, t);
            self.now_ms = t;
        }
    }

    fn check_open(&self) -> Result<(), SessionError> {
        if self.finished {
            Err(SessionError::Finished)
        } else {
            Ok(())
        }
    }

    /// Processes every chunk that ends at or before `t`.
    pub fn advance_to(&mut self, t: i64) -> Result<Vec<OutEvent>, SessionError> {
        self.check_open()?;
        let mut out = Vec::new();
        while let Some(c) = self.chunker.cut_chunk(t) {
            out.extend(self.on_chunk(c)?);
        }
        Ok(out)
    }

    pub fn ingest_frame(&mut self, f: FrameRecord) -> Result<Vec<OutEvent>, SessionError> {
        self.check_open()?;
        self.ensure_origin(f.t_abs_ms);
        let out = self.advance_to(f.t_abs_ms)?;
        self.chunker.push(f.clone())?;
        self.cache.write().expect("cache lock").push_frame(f.clone())?;
        self.archive.push(&self.source, f);
        Ok(out)
    }

    /// Queues a query; it is answered at the end of the chunk containing `t`.
    pub fn submit_query(&mut self, text: &str, t: i64) -> Result<(u64, Vec<OutEvent>), SessionError> {
        self.check_open()?;
        self.ensure_origin(t);
        let out = self.advance_to(t)?;
        let query_id = self.next_query_id;
        self.next_query_id += 1;
        self.pending_queries.push_back(PendingQuery {
            query_id,
            text: text.to_string(),
            t_abs_ms: t.max(self.now_ms),
        });
        Ok((query_id, out))
    }

    pub fn feed(&mut self, e: &TimedEvent) -> Result<Vec<OutEvent>, SessionError> {
        match e {
            TimedEvent::Frame(f) => self.ingest_frame(f.clone()),
            TimedEvent::Query { t_abs_ms, text } => self.submit_query(text, *t_abs_ms).map(|(_, out)| out),
        }
    }

    /// Closes the stream at `last_t`: a final partial chunk covers any input
    /// at or after the last boundary, then the remaining window is written to
    /// memory.
    pub fn finish(&mut self, last_t: i64) -> Result<Vec<OutEvent>, SessionError> {
        self.check_open()?;
        let mut out = Vec::new();
        if self.chunker.origin_set() {
            out = self.advance_to(last_t)?;
            let boundary = self.chunker.boundary().expect("origin set");
            if boundary <= last_t {
                if let Some(c) = self.chunker.flush(last_t + 1) {
                    out.extend(self.on_chunk(c)?);
                }
            }
            let mut tail = Vec::new();
            while let Some(r) = self.pending_records.pop_front() {
                tail.extend(self.offload(r).1);
            }
            for ev in &tail {
                self.record(ev);
            }
            if !tail.is_empty() {
                let stats = self.stats_view();
                self.emit(FeedItem::MemoryStats(stats));
            }
            out.extend(tail);
        }
        self.finished = true;
        Ok(out)
    }

    /// Sets a new objective from a steering client.
    pub fn set_objective(&mut self, text: &str) -> OutEvent {
        self.proactive_calls += 1;
        let res = self.proactive.create_reminder(text, self.now_ms);
        let ev = self.reminder_ack(res, None);
        self.record(&ev);
        ev
    }

    pub fn evolve_objective(&mut self, rid: u64, text: &str) -> OutEvent {
        self.proactive_calls += 1;
        let ev = match self.proactive.evolve_objective(rid, text, self.now_ms) {
            Ok(node) => OutEvent::new(
                EventKind::Answer,
                self.now_ms,
                None,
                format!("Reminder {rid} updated."),
                json!({"route": "proactive", "reminder": node}),
            ),
            Err(e) => self.error_event(None, e.to_string()),
        };
        self.record(&ev);
        ev
    }

    pub fn cancel_objective(&mut self, rid: u64) -> OutEvent {
        self.proactive_calls += 1;
        let ev = match self.proactive.cancel(rid) {
            Ok(node) => OutEvent::new(
                EventKind::Answer,
                self.now_ms,
                None,
                format!("Reminder {rid} cancelled."),
                json!({"route": "proactive", "reminder": node}),
            ),
            Err(e) => self.error_event(None, e.to_string()),
        };
        self.record(&ev);
        ev
    }

    fn error_event(&self, query_id: Option<u64>, message: String) -> OutEvent {
        OutEvent::new(EventKind::Error, self.now_ms, query_id, message, Value::Null)
    }

    fn on_chunk(&mut self, c: Chunk) -> Result<Vec<OutEvent>, SessionError> {
        let expected = self.traces.last().map_or(0, |t| t.chunk_id + 1);
        if c.chunk_id != expected {
            return Err(SessionError::ChunkGap { expected, got: c.chunk_id });
        }
        let mut trace = ChunkTrace {
            chunk_id: c.chunk_id,
            start_ms: c.start_ms,
            end_ms: c.end_ms,
            frames: c.frames.len(),
            ..ChunkTrace::default()
        };
        let mut events = Vec::new();

        self.now_ms = c.end_ms;
        trace.steps.push(Step::Clock);

        let tokens = c
            .frames
            .iter()
            .map(|f| VisualToken {
                key: f.feat.clone(),
                value: f.feat.clone(),
                write_ms: f.t_abs_ms,
            })
            .collect();
        let w = self.kv.write_visual_tokens(tokens);
        trace.written = w.written;
        trace.skipped = w.skipped;
        trace.steps.push(Step::WriteVisual);

        let caption = self.backend.caption_chunk(&c)?;
        self.window = self.window_caption(&c, &caption)?;
        self.pending_records.push_back(PendingRecord {
            chunk: c.clone(),
            caption: caption.clone(),
            notes: Vec::new(),
        });
        let signals = self.proactive.check_chunk(&c, &caption.summary);
        for s in &signals {
            if s.is_silent() {
                continue;
            }
            let rid = s.rid.expect("non-silent signal has a rid");
            events.push(OutEvent::new(
                EventKind::Proactive,
                s.t_abs_ms,
                None,
                s.response_text.clone().unwrap_or_default(),
                json!({"rid": rid, "token": s.token}),
            ));
            let skill = self.proactive.node(rid).and_then(|n| n.skill.clone());
            if let Some(skill) = skill {
                events.extend(self.run_label_calls(&skill, &c));
            }
        }
        let fired = signals.clone();
        self.signals.extend(signals);
        trace.steps.push(Step::Proactive);

        while self.pending_queries.front().is_some_and(|q| q.t_abs_ms < c.end_ms) {
            let q = self.pending_queries.pop_front().expect("front exists");
            events.extend(self.route_query(q));
        }
        trace.steps.push(Step::Queries);

        let steps = self.backend.decode(&self.build_prompt(), &self.kv.snapshot())?;
        trace.decode_steps = steps.len();
        for s in &steps {
            self.kv
                .apply_attention(&s.attn_scores)
                .map_err(|e| BackendError::Protocol(format!("attention scores: {e}")))?;
        }
        trace.visual_before_prune = self.kv.visual_count();
        self.kv.prune_top_p();
        trace.visual_after_prune = self.kv.visual_count();
        trace.steps.push(Step::Decode);

        trace.offloaded = self.kv.slide_window(self.now_ms).len();
        let cutoff = self.now_ms - self.cfg.kv.window_ms();
        while self.pending_records.front().is_some_and(|r| r.chunk.end_ms <= cutoff) {
            let r = self.pending_records.pop_front().expect("front exists");
            let (writes, evs) = self.offload(r);
            trace.memory_writes += writes;
            events.extend(evs);
        }
        trace.oldest_entry_ms = self.kv.entries().iter().map(|e| e.write_ms).min();
        trace.steps.push(Step::Slide);

        self.emit(FeedItem::ChunkMeta(trace.clone()));
        self.traces.push(trace);
        for s in fired {
            self.emit(FeedItem::Signal(s));
        }
        for ev in &events {
            self.record(ev);
        }
        let stats = self.stats_view();
        self.emit(FeedItem::MemoryStats(stats));
        Ok(events)
    }

    /// Caption of the fast-density cache window since the chunk start.
    fn window_caption(&self, c: &Chunk, chunk_caption: &Caption) -> Result<Caption, BackendError> {
        let frames = self.cache.read().expect("cache lock").window(c.start_ms, Density::Fast);
        let same = frames.len() == c.frames.len() && frames.iter().zip(&c.frames).all(|(a, b)| a.frame_id == b.frame_id);
        if same {
            return Ok(chunk_caption.clone());
        }
        self.backend.caption_chunk(&Chunk {
            frames,
            ..c.clone()
        })
    }

    /// Writes a chunk, then one segment per skill note, to memory.
    fn offload(&mut self, r: PendingRecord) -> (usize, Vec<OutEvent>) {
        let mut writes = 0;
        let mut events = Vec::new();
        match self.memory.write_segment(&r.chunk, &r.caption.summary, &r.caption.detail) {
            Ok(_) => writes += 1,
            Err(e) => events.push(self.error_event(None, format!("memory write: {e}"))),
        }
        for (function, text) in r.notes {
            let note = Chunk {
                frames: Vec::new(),
                ..r.chunk.clone()
            };
            match self.memory.write_segment(&note, &format!("skill:{function}"), &text) {
                Ok(_) => writes += 1,
                Err(e) => events.push(self.error_event(None, format!("memory write: {e}"))),
            }
        }
        (writes, events)
    }

    fn run_label_calls(&mut self, skill: &str, c: &Chunk) -> Vec<OutEvent> {
        let manifest = match self.skills.load_skill(skill) {
            Ok(m) => m,
            Err(e) => return vec![self.error_event(None, e.to_string())],
        };
        manifest
            .calls_for_labels(&c.distinct_labels())
            .into_iter()
            .map(|call| {
                let (res, ev) = self.execute_call(&call, None);
                match res {
                    Ok(_) => ev,
                    Err(message) => OutEvent::new(EventKind::Error, ev.t_abs_ms, None, message, ev.payload),
                }
            })
            .collect()
    }

    /// Executes one tool or skill call and reports it as an event.
    fn execute_call(&mut self, call: &ToolCall, query_id: Option<u64>) -> (Result<String, String>, OutEvent) {
        if self.tools.get(&call.name).is_some() {
            let res = self.run_tool(call).map_err(|e| e.to_string());
            let ok = res.is_ok();
            let text = res.clone().unwrap_or_else(|e| e);
            let ev = OutEvent::new(EventKind::ToolResult, self.now_ms, query_id, text, json!({"call": call, "ok": ok}));
            return (res, ev);
        }
        let Some((manifest, schema)) = self.skills.find_function(&call.name) else {
            let message = ToolError::UnknownTool(call.name.clone()).to_string();
            let ev = OutEvent::new(
                EventKind::ToolResult,
                self.now_ms,
                query_id,
                message.clone(),
                json!({"call": call, "ok": false}),
            );
            return (Err(message), ev);
        };
        let res = validate_call(&schema, call).and_then(|filled| {
            let out = self.run_skill_function(&manifest.token, &filled)?;
            Ok((filled, out))
        });
        match res {
            Ok((filled, (text, result))) => {
                if let Some(r) = self.pending_records.back_mut() {
                    r.notes.push((filled.name.clone(), text.clone()));
                }
                let ev = OutEvent::new(
                    EventKind::SkillExec,
                    self.now_ms,
                    query_id,
                    text.clone(),
                    json!({"skill": manifest.name, "call": filled, "ok": true, "result": result}),
                );
                (Ok(text), ev)
            }
            Err(e) => {
                let message = e.to_string();
                let ev = OutEvent::new(
                    EventKind::SkillExec,
                    self.now_ms,
                    query_id,
                    message.clone(),
                    json!({"skill": manifest.name, "call": call, "ok": false}),
                );
                (Err(message), ev)
            }
        }
    }

    fn run_tool(&mut self, call: &ToolCall) -> Result<String, ToolError> {
        let tool = self.tools.get(&call.name).expect("caller checked");
        tool.validate(call)?;
        match call.name.as_str() {
            "video_cut" => video_cut(
                self.backend.as_ref(),
                &self.archive,
                string_arg(call, "query").unwrap_or(""),
                string_arg(call, "path").unwrap_or(""),
                number_arg(call, "start_time").unwrap_or(0.0),
                number_arg(call, "end_time").unwrap_or(0.0),
            ),
            "call_memory" => {
                self.memory_calls += 1;
                call_memory(&self.memory, string_arg(call, "query").unwrap_or("")).map(|(text, _)| text)
            }
            other => Err(ToolError::NotAvailable(other.to_string())),
        }
    }

    /// Handlers for skill functions; returns display text and a result payload.
    fn run_skill_function(&mut self, token: &str, call: &ToolCall) -> Result<(String, Value), SkillError> {
        if let Some(res) = run_plain_handler(call) {
            return res.map(|o| (o.text, o.payload));
        }
        let handler_err = |message: String| SkillError::Handler {
            function: call.name.clone(),
            message,
        };
        match call.name.as_str() {
            "solve_problems" => {
                let query = string_arg(call, "query").unwrap_or("");
                let qtype = string_arg(call, "question_type").unwrap_or("");
                let text = self
                    .backend
                    .generate(&GenerateRequest {
                        purpose: Purpose::SolveProblem,
                        prompt: format!("QUESTION_TYPE:{qtype}\nPROBLEM:{query}"),
                        draft: format!("Solution ({qtype}): {query}"),
                    })
                    .map_err(|e| handler_err(e.to_string()))?;
                Ok((text.clone(), json!({"answer": text})))
            }
            "create_proactive_node" => {
                let query = string_arg(call, "query").unwrap_or("");
                self.proactive_calls += 1;
                let node = self
                    .proactive
                    .create_reminder_with_token(query, self.now_ms, token)
                    .map_err(|e| handler_err(e.to_string()))?;
                Ok((ack_text(&node), json!({"reminder": node})))
            }
            other => Err(handler_err(format!("no handler for {other}"))),
        }
    }

    fn reminder_ack(&self, res: Result<ReminderNode, ProactiveError>, query_id: Option<u64>) -> OutEvent {
        match res {
            Ok(node) => OutEvent::new(
                EventKind::Answer,
                self.now_ms,
                query_id,
                ack_text(&node),
                json!({"route": "proactive", "reminder": node}),
            ),
            Err(ProactiveError::UnparseableObjective(_)) => OutEvent::new(
                EventKind::Answer,
                self.now_ms,
                query_id,
                "Sorry, I could not tell when or on what to remind you. Could you rephrase?",
                json!({"route": "proactive", "error": "unparseable_objective"}),
            ),
            Err(e) => self.error_event(query_id, e.to_string()),
        }
    }

    fn route_query(&mut self, q: PendingQuery) -> Vec<OutEvent> {
        let class = match self.backend.classify_query(&q.text) {
            Ok(c) => c,
            Err(e) => return vec![self.error_event(Some(q.query_id), e.to_string())],
        };
        let before = (self.memory_calls, self.proactive_calls);
        let mut events = match class {
            QueryClass::Proactive => {
                self.proactive_calls += 1;
                let res = self.proactive.create_reminder(&q.text, q.t_abs_ms);
                vec![self.reminder_ack(res, Some(q.query_id))]
            }
            QueryClass::Memory => vec![self.memory_path(&q)],
            QueryClass::Direct => self.direct_path(&q),
        };
        self.routes.push(RouteRecord {
            query_id: q.query_id,
            class,
            memory_calls: self.memory_calls - before.0,
            proactive_calls: self.proactive_calls - before.1,
        });
        let answer = events.iter().rev().find(|e| e.kind == EventKind::Answer).map(|e| e.text.clone());
        for (text, t) in [(Some(q.text.clone()), q.t_abs_ms), (answer, self.now_ms)] {
            let Some(text) = text else { continue };
            match self.backend.embed_text(&text) {
                Ok(emb) => {
                    self.kv.write_textual(emb.0.clone(), emb.0, t);
                }
                Err(e) => events.push(self.error_event(Some(q.query_id), e.to_string())),
            }
        }
        events
    }

    fn memory_path(&mut self, q: &PendingQuery) -> OutEvent {
        let base = format!("{}\nQUERY:{}", self.build_prompt(), q.text);
        let rewritten = match self.backend.generate(&GenerateRequest {
            purpose: Purpose::RewriteQuery,
            prompt: base.clone(),
            draft: rewrite_memory_query(&q.text),
        }) {
            Ok(r) => r,
            Err(e) => return self.error_event(Some(q.query_id), e.to_string()),
        };
        self.memory_calls += 1;
        let (text, hits) = match call_memory(&self.memory, &rewritten) {
            Ok(r) => r,
            Err(e) => return self.error_event(Some(q.query_id), e.to_string()),
        };
        let draft = format!(
            "Earlier: {}. Now: {}.",
            text.lines().collect::<Vec<_>>().join(" | "),
            describe_window(&self.window)
        );
        match self.backend.generate(&GenerateRequest {
            purpose: Purpose::Answer,
            prompt: format!("{base}\nMEMORY:{text}"),
            draft,
        }) {
            Ok(answer) => OutEvent::new(
                EventKind::Answer,
                self.now_ms,
                Some(q.query_id),
                answer,
                json!({
                    "route": "memory",
                    "rewritten": rewritten,
                    "memory_nodes": hits.iter().map(|h| h.node_id).collect::<Vec<_>>(),
                }),
            ),
            Err(e) => self.error_event(Some(q.query_id), e.to_string()),
        }
    }

    fn direct_path(&mut self, q: &PendingQuery) -> Vec<OutEvent> {
        let backend = self.backend.clone();
        let skills = self.skills.clone();
        let intents = self.cfg.agent.intents.clone();
        let first = clip_call(&q.text, &self.source).or_else(|| {
            match_intent(&q.text, &intents).map(|(intent, call)| {
                if let Some(s) = &intent.skill {
                    // a missing skill surfaces as an unknown-function result
                    let _ = skills.load_skill(s);
                }
                call
            })
        });
        let now = format!("Now: {}.", describe_window(&self.window));
        let base = format!("{}\nQUERY:{}", self.build_prompt(), q.text);
        let max_steps = self.cfg.agent.max_steps;
        let mut events = Vec::new();
        let outcome = {
            let mut policy = |state: &crate::tools::agent::LoopState| {
                let draft = match (&first, state.records.last()) {
                    (Some(call), None) => serde_json::to_string(call).expect("call serializes"),
                    (None, None) => now.clone(),
                    (_, Some(last)) => match state.records.iter().rev().find(|r| r.ok) {
                        Some(r) => r.text.clone(),
                        None => format!("I could not complete that: {}", last.text),
                    },
                };
                let results: Vec<String> = state
                    .records
                    .iter()
                    .map(|r| format!("RESULT {}: {}", r.call.name, r.text))
                    .collect();
                let mut prompt = base.clone();
                for r in &results {
                    prompt.push('\n');
                    prompt.push_str(r);
                }
                backend.generate(&GenerateRequest {
                    purpose: Purpose::AgentStep,
                    prompt,
                    draft,
                })
            };
            let mut exec = |call: &ToolCall| {
                let (res, ev) = self.execute_call(call, Some(q.query_id));
                events.push(ev);
                res
            };
            run_agentic_loop(max_steps, &mut policy, &mut exec)
        };
        match outcome.error {
            Some(e) => events.push(self.error_event(Some(q.query_id), e)),
            None => events.push(OutEvent::new(
                EventKind::Answer,
                self.now_ms,
                Some(q.query_id),
                outcome.final_text,
                json!({"route": "direct", "steps": outcome.steps, "forced": outcome.forced}),
            )),
        }
        events
    }
}

fn ack_text(node: &ReminderNode) -> String {
    match node.kind {
        ReminderKind::TimeAware => format!("OK. I will remind you at {} ms.", node.trigger_at_ms.unwrap_or_default()),
        ReminderKind::EventGrounding => {
            let labels: Vec<&str> = node.condition_labels.iter().map(String::as_str).collect();
            format!("OK. I will notify you when I see {}.", labels.join(", "))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;
    use crate::proactive::{ConditionRule, TIME_AWARE_TOKEN};
    use crate::vector;

    fn unit(i: usize) -> Vec<f64> {
        let mut v = vector::zeros();
        v[i % vector::DIM] = 1.0;
        v
    }

    fn frame(id: u64, t: i64, labels: &[&str], summary: &str) -> FrameRecord {
        FrameRecord::new(id, t, Some(unit(id as usize)))
            .unwrap()
            .with_labels(labels.iter().copied())
            .with_summary(summary)
    }

    fn session(cfg: RuntimeConfig) -> Session {
        Session::new(cfg, Arc::new(MockBackend::new()), "live").unwrap()
    }

    #[test]
    fn steps_run_in_order_per_chunk() {
        let mut s = session(RuntimeConfig::default());
        for i in 0..10 {
            s.ingest_frame(frame(i, 1000 + i as i64 * 500, &["road"], "road ahead")).unwrap();
        }
        s.finish(5500).unwrap();
        assert_eq!(s.traces().len(), 3);
        for t in s.traces() {
            assert_eq!(
                t.steps,
                vec![Step::Clock, Step::WriteVisual, Step::Proactive, Step::Queries, Step::Decode, Step::Slide]
            );
        }
        assert_eq!(s.traces()[2].end_ms, 5501);
        assert_eq!(s.memory_stats().segments, 3);
    }

    #[test]
    fn time_aware_reminder_fires_once() {
        let mut s = session(RuntimeConfig::default());
        s.ingest_frame(frame(0, 0, &[], "desk")).unwrap();
        s.submit_query("Remind me in 5 seconds to stretch", 100).unwrap();
        let mut t = 500;
        while t < 12_000 {
            s.ingest_frame(frame(t as u64, t, &[], "desk")).unwrap();
            t += 500;
        }
        s.finish(t).unwrap();
        let proactive: Vec<&OutEvent> = s.transcript().iter().filter(|e| e.kind == EventKind::Proactive).collect();
        assert_eq!(proactive.len(), 1);
        assert_eq!(proactive[0].t_abs_ms, 6000);
        assert_eq!(proactive[0].text, "Time is up. Please get ready to stretch");
        assert_eq!(proactive[0].payload["token"], TIME_AWARE_TOKEN);
        let ack = &s.transcript()[0];
        assert_eq!((ack.kind, ack.query_id), (EventKind::Answer, Some(0)));
        assert_eq!(ack.text, "OK. I will remind you at 5100 ms.");
        assert_eq!(s.routes()[0].proactive_calls, 1);
    }

    #[test]
    fn event_reminder_and_steering() {
        let mut cfg = RuntimeConfig::default();
        cfg.proactive.conditions.push(ConditionRule {
            phrase: "a goal".into(),
            labels: vec!["goal_scored".into()],
            token: "<TRIG:goal>".into(),
            template: "Goal at {time}".into(),
        });
        let mut s = session(cfg);
        s.ingest_frame(frame(0, 0, &[], "pitch")).unwrap();
        let ack = s.set_objective("tell me when a goal happens");
        assert_eq!(ack.text, "OK. I will notify you when I see goal_scored.");
        let bad = s.set_objective("something vague");
        assert_eq!(bad.payload["error"], "unparseable_objective");
        s.ingest_frame(frame(1, 2500, &["goal_scored"], "goal")).unwrap();
        let out = s.ingest_frame(frame(2, 4000, &[], "pitch")).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].text, "Goal at 4000");
        assert_eq!(s.cancel_objective(0).text, "Reminder 0 cancelled.");
        assert_eq!(s.evolve_objective(0, "x").kind, EventKind::Error);
        assert_eq!(s.evolve_objective(9, "x").kind, EventKind::Error);
    }

    #[test]
    fn memory_query_uses_offloaded_segments() {
        let mut cfg = RuntimeConfig::default();
        cfg.kv.window_seconds = 4.0;
        let mut s = session(cfg);
        for i in 0..8 {
            let (l, sum) = if i < 4 { ("traffic", "heavy traffic") } else { ("clear", "clear road") };
            s.ingest_frame(frame(i, i as i64 * 1000, &[l], sum)).unwrap();
        }
        s.submit_query("What has changed in traffic compared to five minutes ago?", 7500).unwrap();
        s.ingest_frame(frame(8, 8000, &["clear"], "clear road")).unwrap();
        let ans = s.transcript().iter().find(|e| e.kind == EventKind::Answer).unwrap();
        assert_eq!(ans.payload["route"], "memory");
        assert_eq!(
            ans.payload["rewritten"],
            "Describe the traffic and key characteristics five minutes ago in detail."
        );
        assert!(ans.text.starts_with("Earlier: ["), "{}", ans.text);
        assert_eq!(s.routes()[0].class, QueryClass::Memory);
        assert_eq!(s.routes()[0].memory_calls, 1);
    }

    #[test]
    fn direct_query_with_clip_runs_video_cut() {
        let mut s = session(RuntimeConfig::default());
        for i in 0..6 {
            s.ingest_frame(frame(i, 10_000 + i as i64 * 1000, &["ball"], "ball")).unwrap();
        }
        s.submit_query("What happens from 1 to 3 seconds?", 15_500).unwrap();
        s.finish(15_500).unwrap();
        let kinds: Vec<EventKind> = s.transcript().iter().map(|e| e.kind).collect();
        assert_eq!(kinds, vec![EventKind::ToolResult, EventKind::Answer]);
        assert_eq!(s.transcript()[0].text, "[1-3] ball — ball");
        assert_eq!(s.transcript()[1].text, "[1-3] ball — ball");
        assert_eq!(s.transcript()[1].payload["steps"], 2);
        assert_eq!(s.routes()[0].memory_calls, 0);
    }

    #[test]
    fn direct_query_without_tools_describes_window() {
        let mut s = session(RuntimeConfig::default());
        s.ingest_frame(frame(0, 0, &["cat"], "a cat")).unwrap();
        s.submit_query("What is on the table?", 500).unwrap();
        s.finish(1000).unwrap();
        let ans = &s.transcript()[0];
        assert_eq!(ans.text, "Now: cat (a cat).");
        assert_eq!(ans.payload["steps"], 1);
        assert!(s.kv().entries().iter().any(|e| e.modality == crate::backend::Modality::Textual));
    }

    #[test]
    fn finished_session_rejects_input() {
        let mut s = session(RuntimeConfig::default());
        assert!(s.finish(0).unwrap().is_empty());
        assert_eq!(s.ingest_frame(frame(0, 0, &[], "")), Err(SessionError::Finished));
    }

    #[test]
    fn prompt_ends_with_window_line() {
        let mut s = session(RuntimeConfig::default());
        s.ingest_frame(frame(0, 0, &["dog"], "dog")).unwrap();
        s.advance_to(2000).unwrap();
        let p = s.build_prompt();
        assert!(p.starts_with("NOW_ABS_MS=2000\n"));
        assert!(p.ends_with("\nWINDOW:dog"));
    }

    #[test]
    fn feed_orders_items_per_chunk() {
        let mut s = session(RuntimeConfig::default()).with_feed();
        s.ingest_frame(frame(0, 0, &["cat"], "cat")).unwrap();
        s.submit_query("What is here?", 100).unwrap();
        s.advance_to(2000).unwrap();
        let feed = s.drain_feed();
        assert!(matches!(feed[0], FeedItem::ChunkMeta(ref t) if t.end_ms == 2000));
        assert!(matches!(feed[1], FeedItem::Signal(ref x) if x.is_silent()));
        assert!(matches!(feed[2], FeedItem::Event(ref e) if e.kind == EventKind::Answer));
        assert!(matches!(feed[3], FeedItem::MemoryStats(ref m) if m.kv_visual_count == 1));
        assert_eq!(feed.len(), 4);
        assert!(s.drain_feed().is_empty());
    }
}
