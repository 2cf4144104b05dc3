//! Live-session gateway: newline-delimited JSON over TCP.
//!
//! One session loop owns the [`Session`]. Each connection gets a reader
//! thread that parses client messages into a bounded FIFO and a writer thread
//! that drains the connection's outbound channel. Broadcasts carry a global
//! sequence number and are kept for `state_request` replay. The message
//! catalog is documented in `docs/gateway.md`.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicI64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use streamclaw_core::scenario::TimedLine;
use streamclaw_core::session::{EventKind, FeedItem, OutEvent, Session};

use crate::runner::{feed_error, RunError};

/// Client-to-session message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientMessage {
    #[serde(default)]
    pub id: Value,
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub body: Map<String, Value>,
}

/// Session-to-client message. `seq` is null for unicast replies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerMessage {
    pub seq: Option<u64>,
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(rename = "ref")]
    pub reference: Value,
    pub body: Value,
}

impl ServerMessage {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }
}

pub const CLIENT_TYPES: &[&str] = &[
    "query",
    "set_objective",
    "evolve_objective",
    "cancel_objective",
    "pause",
    "resume",
    "state_request",
];

/// Gateway type of a transcript event.
pub fn event_type(kind: EventKind) -> &'static str {
    match kind {
        EventKind::Answer => "answer",
        EventKind::Proactive => "proactive",
        EventKind::ToolResult => "tool_result",
        EventKind::SkillExec => "skill_exec",
        EventKind::Error => "error",
    }
}

/// Outbound channel per connection; `None` closes it.
type Conns = Arc<Mutex<BTreeMap<u64, Sender<Option<String>>>>>;
type Writers = Arc<Mutex<Vec<JoinHandle<()>>>>;
type Inbound = Arc<Mutex<VecDeque<(u64, ClientMessage)>>>;

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub listen: String,
    pub speed: f64,
    pub queue_cap: usize,
    /// Wall time between clock ticks once the scenario is exhausted.
    pub idle_tick: Duration,
    /// Finish after this many idle ticks; `None` serves until killed.
    pub max_idle_chunks: Option<u64>,
    /// Clients to wait for before replay starts.
    pub wait_clients: usize,
    pub start_paused: bool,
}

pub struct Gateway {
    addr: String,
    conns: Conns,
    inbound: Inbound,
    clients_seen: Arc<AtomicUsize>,
    writers: Writers,
    history: Vec<String>,
    next_seq: u64,
}

fn unicast_error(now: i64, reference: Value, message: String) -> String {
    ServerMessage {
        seq: None,
        kind: "error".into(),
        reference,
        body: json!({"t_abs_ms": now, "message": message}),
    }
    .to_line()
}

/// Registers the connection's writer; returns its outbound channel.
fn register(stream: &TcpStream, id: u64, conns: &Conns, writers: &Writers) -> Option<Sender<Option<String>>> {
    let mut writer = stream.try_clone().ok()?;
    let (tx, rx) = mpsc::channel::<Option<String>>();
    conns.lock().expect("conns lock").insert(id, tx.clone());
    let handle = thread::spawn(move || {
        for line in rx.iter().map_while(|l| l) {
            if writer.write_all(line.as_bytes()).and_then(|_| writer.write_all(b"\n")).is_err() {
                break;
            }
            let _ = writer.flush();
        }
        let _ = writer.shutdown(Shutdown::Both);
    });
    writers.lock().expect("writers lock").push(handle);
    Some(tx)
}

fn read_connection(
    stream: TcpStream,
    id: u64,
    tx: Sender<Option<String>>, conns: Conns, inbound: Inbound, cap: usize, now: Arc<AtomicI64>) {
    for line in BufReader::new(stream).lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let t = now.load(Ordering::SeqCst);
        let msg: ClientMessage = match serde_json::from_str(&line) {
            Ok(m) => m,
            Err(e) => {
                let _ = tx.send(Some(unicast_error(t, Value::Null, format!("malformed message: {e}"))));
                continue;
            }
        };
        if !CLIENT_TYPES.contains(&msg.kind.as_str()) {
            let _ = tx.send(Some(unicast_error(t, msg.id, format!("unknown message type {:?}", msg.kind))));
            continue;
        }
        let mut q = inbound.lock().expect("inbound lock");
        if q.len() >= cap {
            drop(q);
            let _ = tx.send(Some(unicast_error(t, msg.id, format!("queue full (cap {cap})"))));
            continue;
        }
        q.push_back((id, msg));
    }
    conns.lock().expect("conns lock").remove(&id);
}

impl Gateway {
    /// Binds and starts accepting connections.
    pub fn bind(addr: &str, queue_cap: usize, now: Arc<AtomicI64>) -> Result<Self, RunError> {
        let listener = TcpListener::bind(addr).map_err(|e| RunError::Bind {
            addr: addr.to_string(),
            message: e.to_string(),
        })?;
        let local = listener.local_addr().map(|a| a.to_string()).unwrap_or_else(|_| addr.to_string());
        let conns: Conns = Arc::default();
        let inbound: Inbound = Arc::default();
        let clients_seen = Arc::new(AtomicUsize::new(0));
        let writers: Writers = Arc::default();
        {
            let (conns, inbound, seen, writers) = (conns.clone(), inbound.clone(), clients_seen.clone(), writers.clone());
            thread::spawn(move || {
                for (id, stream) in listener.incoming().enumerate() {
                    let Ok(stream) = stream else { continue };
                    let id = id as u64;
                    let Some(tx) = register(&stream, id, &conns, &writers) else { continue };
                    seen.fetch_add(1, Ordering::SeqCst);
                    let (conns, inbound, now) = (conns.clone(), inbound.clone(), now.clone());
                    thread::spawn(move || read_connection(stream, id, tx, conns, inbound, queue_cap, now));
                }
            });
        }
        Ok(Self {
            addr: local,
            conns,
            inbound,
            clients_seen,
            writers,
            history: Vec::new(),
            next_seq: 0,
        })
    }

    pub fn local_addr(&self) -> &str {
        &self.addr
    }

    pub fn clients_seen(&self) -> usize {
        self.clients_seen.load(Ordering::SeqCst)
    }

    pub fn take_inbound(&self) -> Vec<(u64, ClientMessage)> {
        self.inbound.lock().expect("inbound lock").drain(..).collect()
    }

    pub fn broadcast(&mut self, kind: &str, reference: Value, body: Value) {
        let line = ServerMessage {
            seq: Some(self.next_seq),
            kind: kind.to_string(),
            reference,
            body,
        }
        .to_line();
        self.next_seq += 1;
        for tx in self.conns.lock().expect("conns lock").values() {
            let _ = tx.send(Some(line.clone()));
        }
        self.history.push(line);
    }

    pub fn unicast(&self, conn: u64, line: String) {
        if let Some(tx) = self.conns.lock().expect("conns lock").get(&conn) {
            let _ = tx.send(Some(line));
        }
    }

    /// Re-sends broadcasts with `seq >= from` to one connection.
    pub fn replay_to(&self, conn: u64, from: u64) {
        for line in self.history.iter().skip(from as usize) {
            self.unicast(conn, line.clone());
        }
    }

    /// Closes every connection after its queued lines are written.
    pub fn close(self) {
        for tx in self.conns.lock().expect("conns lock").values() {
            let _ = tx.send(None);
        }
        let handles: Vec<_> = self.writers.lock().expect("writers lock").drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
    }
}

fn event_body(ev: &OutEvent) -> Value {
    serde_json::to_value(ev).expect("event serializes")
}

/// Session loop state shared by the serve command.
struct Loop {
    session: Session,
    gateway: Gateway,
    now: Arc<AtomicI64>,
    paused: bool,
    /// Client id of each query, by session query id.
    query_refs: HashMap<u64, Value>,
}

impl Loop {
    fn publish(&mut self, steering_ref: Option<&Value>) {
        self.now.store(self.session.now_ms(), Ordering::SeqCst);
        for item in self.session.drain_feed() {
            match item {
                FeedItem::ChunkMeta(t) => {
                    let mut body = serde_json::to_value(&t).expect("trace serializes");
                    body["t_abs_ms"] = json!(t.end_ms);
                    self.gateway.broadcast("chunk_meta", Value::Null, body);
                }
                FeedItem::Signal(s) => {
                    let body = serde_json::to_value(&s).expect("signal serializes");
                    self.gateway.broadcast("signal", Value::Null, body);
                }
                FeedItem::Event(ev) => {
                    let reference = match (ev.query_id, steering_ref) {
                        (Some(q), _) => self.query_refs.get(&q).cloned().unwrap_or(Value::Null),
                        (None, Some(r)) => r.clone(),
                        (None, None) => Value::Null,
                    };
                    self.gateway.broadcast(event_type(ev.kind), reference, event_body(&ev));
                }
                FeedItem::MemoryStats(m) => {
                    let mut body = serde_json::to_value(m).expect("stats serialize");
                    body["paused"] = json!(self.paused);
                    self.gateway.broadcast("memory_stats", Value::Null, body);
                }
            }
        }
    }

    fn stats_reply(&mut self, reference: Value) {
        let mut body = serde_json::to_value(self.session.stats_view()).expect("stats serialize");
        body["paused"] = json!(self.paused);
        self.gateway.broadcast("memory_stats", reference, body);
    }

    fn handle(&mut self, conn: u64, msg: ClientMessage) -> Result<(), RunError> {
        let now = self.session.now_ms();
        let text = msg.body.get("text").and_then(Value::as_str).map(str::to_string);
        let rid = msg.body.get("rid").and_then(Value::as_u64);
        let bad = |what: &str| unicast_error(now, msg.id.clone(), format!("{} requires {what}", msg.kind));
        match msg.kind.as_str() {
            "query" => {
                let Some(text) = text else {
                    self.gateway.unicast(conn, bad("body.text"));
                    return Ok(());
                };
                let (qid, _) = self
                    .session
                    .submit_query(&text, now)
                    .map_err(|e| feed_error(Path::new("<gateway>"), 0, e))?;
                self.query_refs.insert(qid, msg.id.clone());
                self.publish(None);
            }
            "set_objective" => {
                let Some(text) = text else {
                    self.gateway.unicast(conn, bad("body.text"));
                    return Ok(());
                };
                self.session.set_objective(&text);
                self.publish(Some(&msg.id));
            }
            "evolve_objective" => {
                let (Some(rid), Some(text)) = (rid, text) else {
                    self.gateway.unicast(conn, bad("body.rid and body.text"));
                    return Ok(());
                };
                self.session.evolve_objective(rid, &text);
                self.publish(Some(&msg.id));
            }
            "cancel_objective" => {
                let Some(rid) = rid else {
                    self.gateway.unicast(conn, bad("body.rid"));
                    return Ok(());
                };
                self.session.cancel_objective(rid);
                self.publish(Some(&msg.id));
            }
            "pause" | "resume" => {
                self.paused = msg.kind == "pause";
                self.stats_reply(msg.id);
            }
            "state_request" => {
                if let Some(from) = msg.body.get("replay_from").and_then(Value::as_u64) {
                    self.gateway.replay_to(conn, from);
                }
                self.stats_reply(msg.id);
            }
            other => unreachable!("reader filters unknown type {other}"),
        }
        Ok(())
    }

    fn drain_inbound(&mut self) -> Result<bool, RunError> {
        let msgs = self.gateway.take_inbound();
        let any = !msgs.is_empty();
        for (conn, msg) in msgs {
            self.handle(conn, msg)?;
        }
        Ok(any)
    }
}

/// Serves one session: replays the scenario while clients steer it, then
/// keeps the clock ticking so late queries and reminders still resolve.
pub fn serve(
    session: Session,
    path: &Path,
    timeline: &[TimedLine],
    opts: &ServeOptions,
    on_listen: impl FnOnce(&str),
) -> Result<Session, RunError> {
    let now = Arc::new(AtomicI64::new(0));
    let gateway = Gateway::bind(&opts.listen, opts.queue_cap, now.clone())?;
    on_listen(gateway.local_addr());
    let mut lp = Loop {
        session: session.with_feed(),
        gateway,
        now,
        paused: opts.start_paused,
        query_refs: HashMap::new(),
    };
    while lp.gateway.clients_seen() < opts.wait_clients {
        thread::sleep(Duration::from_millis(2));
    }

    let t0 = timeline.first().map(|l| l.event.t_abs_ms()).unwrap_or(0);
    let mut virtual_ms = 0.0f64;
    let mut last_wall = Instant::now();
    let mut idx = 0;
    let mut idle_ticks = 0u64;
    let mut last_tick = Instant::now();
    loop {
        let busy = lp.drain_inbound()?;
        let wall = Instant::now();
        if !lp.paused {
            virtual_ms += wall.duration_since(last_wall).as_secs_f64() * 1000.0 * opts.speed;
        }
        last_wall = wall;
        if lp.paused {
            thread::sleep(Duration::from_millis(2));
            continue;
        }
        if idx < timeline.len() {
            let l = &timeline[idx];
            let due = opts.speed == 0.0 || (l.event.t_abs_ms() - t0) as f64 <= virtual_ms;
            if due {
                lp.session.feed(&l.event).map_err(|e| feed_error(path, l.line, e))?;
                lp.publish(None);
                idx += 1;
                last_tick = Instant::now();
            } else {
                thread::sleep(Duration::from_millis(1));
            }
            continue;
        }
        if opts.max_idle_chunks.is_some_and(|m| idle_ticks >= m) {
            let last = lp.session.now_ms();
            lp.session.finish(last).map_err(|e| feed_error(path, 0, e))?;
            lp.publish(None);
            break;
        }
        if last_tick.elapsed() >= opts.idle_tick {
            if let Some(end) = lp.session.next_chunk_end() {
                lp.session.advance_to(end).map_err(|e| feed_error(path, 0, e))?;
                lp.publish(None);
            }
            idle_ticks += 1;
            last_tick = Instant::now();
        } else if !busy {
            thread::sleep(Duration::from_millis(1));
        }
    }
    let Loop { session, gateway, .. } = lp;
    gateway.close();
    Ok(session)
}
