use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use serde_json::{json, Value};

/// Frames every half second for `seconds`, anchored at absolute time 0.
fn scenario(dir: &Path, seconds: u32) -> String {
    let mut text = "{\"type\":\"anchor\",\"device_rel_s\":0,\"abs_ms\":0}\n".to_string();
    for i in 0..seconds * 2 {
        text += &format!(
            "{{\"type\":\"frame\",\"t_rel_s\":{},\"labels\":[\"desk\"],\"summary\":\"a person at a desk\"}}\n",
            i as f64 / 2.0
        );
    }
    let p = dir.join("live.jsonl");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

struct Server {
    child: Child,
    addr: String,
}

fn spawn(args: &[&str]) -> Server {
    let mut child = Command::new(env!("CARGO_BIN_EXE_streamclaw"))
        .env_remove("STREAMCLAW_BACKEND")
        .arg("serve")
        .args(args)
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.as_mut().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("listen banner").to_string();
    Server { child, addr }
}

struct Client {
    w: TcpStream,
    r: BufReader<TcpStream>,
}

impl Client {
    fn connect(addr: &str) -> Self {
        let w = TcpStream::connect(addr).unwrap();
        w.set_read_timeout(Some(Duration::from_secs(20))).unwrap();
        let r = BufReader::new(w.try_clone().unwrap());
        Self { w, r }
    }

    fn send(&mut self, v: Value) {
        writeln!(self.w, "{v}").unwrap();
    }

    fn next(&mut self) -> Option<Value> {
        let mut line = String::new();
        match self.r.read_line(&mut line) {
            Ok(0) | Err(_) => None,
            Ok(_) => Some(serde_json::from_str(&line).unwrap()),
        }
    }

    /// Reads until `pred` holds; returns every message read.
    fn until(&mut self, pred: impl Fn(&Value) -> bool) -> Vec<Value> {
        let mut seen = Vec::new();
        while let Some(m) = self.next() {
            let done = pred(&m);
            seen.push(m);
            if done {
                return seen;
            }
        }
        panic!("connection closed before match; got {seen:#?}");
    }

    fn rest(&mut self) -> Vec<Value> {
        std::iter::from_fn(|| self.next()).collect()
    }
}

fn is(m: &Value, kind: &str, reference: &str) -> bool {
    m["type"] == kind && m["ref"] == reference
}

#[test]
fn steering_queries_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let scen = scenario(dir.path(), 10);
    let transcript = dir.path().join("t.jsonl");
    let mut srv = spawn(&[
        &scen,
        "--listen",
        "127.0.0.1:0",
        "--start-paused",
        "--wait-clients",
        "2",
        "--idle-tick-ms",
        "50",
        "--max-idle-chunks",
        "20",
        "--transcript",
        transcript.to_str().unwrap(),
    ]);
    let mut a = Client::connect(&srv.addr);
    let mut b = Client::connect(&srv.addr);

    a.send(json!({"id": "s1", "type": "set_objective", "body": {"text": "Remind me to stretch in 3 seconds"}}));
    let mut all_a = a.until(|m| is(m, "answer", "s1"));
    let ack = all_a.last().unwrap().clone();
    assert!(ack["seq"].is_u64());
    assert!(ack["body"]["text"].as_str().unwrap().contains("remind you at 3000"), "{ack}");

    b.send(json!({"id": "q7", "type": "query", "body": {"text": "What is happening right now?"}}));
    b.send(json!({"id": "r1", "type": "resume", "body": {}}));
    let answer = b.until(|m| is(m, "answer", "q7"));
    let answer = answer.last().unwrap();
    assert_eq!(answer["body"]["payload"]["route"], "direct");
    assert!(answer["body"]["text"].as_str().unwrap().contains("desk"), "{answer}");

    let fire = |m: &Value| m["type"] == "proactive" && m["body"]["text"].as_str().unwrap_or("").contains("stretch");
    all_a.extend(a.until(fire));
    let from_b = b.until(fire);
    assert_eq!(all_a.last().unwrap(), from_b.last().unwrap());
    assert_eq!(all_a.last().unwrap()["body"]["t_abs_ms"], 4000);
    let resumed = all_a.iter().find(|m| is(m, "memory_stats", "r1")).expect("resume ack");
    assert_eq!(resumed["body"]["paused"], false);

    b.send(json!({"id": "st", "type": "state_request", "body": {"replay_from": 0}}));
    let replayed = b.until(|m| is(m, "memory_stats", "st"));
    let stats = replayed.last().unwrap();
    for field in ["t_abs_ms", "segments", "atomic_actions", "events", "kv_visual_count", "paused"] {
        assert!(!stats["body"][field].is_null(), "missing {field}: {stats}");
    }
    assert_eq!(replayed.iter().find(|m| m["seq"] == 0).unwrap(), &all_a[0]);
    all_a.extend(a.rest());
    b.rest();
    assert!(srv.child.wait().unwrap().success());

    let seqs: Vec<u64> = all_a.iter().filter_map(|m| m["seq"].as_u64()).collect();
    assert_eq!(seqs, (0..seqs.len() as u64).collect::<Vec<_>>());
    let events: Vec<&Value> = all_a
        .iter()
        .filter(|m| ["answer", "proactive", "tool_result", "skill_exec", "error"].contains(&m["type"].as_str().unwrap()))
        .map(|m| &m["body"])
        .collect();
    let logged: Vec<Value> = fs::read_to_string(&transcript)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(events, logged.iter().collect::<Vec<_>>());
    let metas = all_a.iter().filter(|m| m["type"] == "chunk_meta").count();
    assert!(metas >= 5);
    assert!(all_a.iter().any(|m| m["type"] == "signal"));
}

#[test]
fn bad_messages_get_unicast_errors() {
    let dir = tempfile::tempdir().unwrap();
    let scen = scenario(dir.path(), 2);
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, "[gateway]\nqueue_cap = 1\n").unwrap();
    let mut srv = spawn(&[
        &scen,
        "--config",
        cfg.to_str().unwrap(),
        "--listen",
        "127.0.0.1:0",
        "--start-paused",
        "--wait-clients",
        "1",
        "--max-idle-chunks",
        "1",
        "--idle-tick-ms",
        "10",
    ]);
    let mut c = Client::connect(&srv.addr);
    c.send(json!({"id": 1, "type": "dance", "body": {}}));
    let m = c.next().unwrap();
    assert_eq!((m["seq"].clone(), m["type"].clone(), m["ref"].clone()), (Value::Null, json!("error"), json!(1)));
    assert!(m["body"]["message"].as_str().unwrap().contains("unknown message type"));

    writeln!(c.w, "{{not json").unwrap();
    let m = c.next().unwrap();
    assert!(m["seq"].is_null() && m["body"]["message"].as_str().unwrap().starts_with("malformed message"));

    c.send(json!({"id": 2, "type": "query", "body": {}}));
    let m = c.until(|m| m["ref"] == 2);
    assert!(m.last().unwrap()["body"]["message"].as_str().unwrap().contains("requires body.text"));

    let burst: String = (0..2000)
        .map(|i| json!({"id": 100 + i, "type": "state_request", "body": {}}).to_string() + "\n")
        .collect();
    c.w.write_all(burst.as_bytes()).unwrap();
    let full = c.until(|m| m["type"] == "error" && m["body"]["message"].as_str().unwrap().contains("queue full"));
    assert!(full.last().unwrap()["seq"].is_null());

    loop {
        c.send(json!({"id": "go", "type": "resume", "body": {}}));
        let got = c.until(|m| m["ref"] == "go");
        if got.last().unwrap()["type"] == "memory_stats" {
            break;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    c.rest();
    assert!(srv.child.wait().unwrap().success());
}
