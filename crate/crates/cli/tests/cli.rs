use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_streamclaw"))
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn run(args: &[&str]) -> Output {
    bin().env_remove("STREAMCLAW_BACKEND").args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const HEADER: &str = "{\"type\":\"anchor\",\"device_rel_s\":0,\"abs_ms\":0}\n";

#[test]
fn goldens_match() {
    for name in ["driver_fatigue", "household_fall", "tutor_proactive", "trip_reminder", "mixed_queries"] {
        let scen = scenarios().join(format!("{name}.jsonl"));
        let out = run(&["run", scen.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{name}: {}", String::from_utf8_lossy(&out.stderr));
        let golden = fs::read(scenarios().join(format!("golden/{name}.transcript.jsonl"))).unwrap();
        assert!(out.stdout == golden, "{name} transcript differs from golden");
    }
}

#[test]
fn empty_scenario_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.jsonl");
    fs::write(&p, "").unwrap();
    let out = run(&["run", p.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(out.stdout.is_empty());
}

#[test]
fn malformed_line_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.jsonl");
    let mut text = HEADER.to_string();
    for i in 0..5 {
        text += &format!("{{\"type\":\"frame\",\"t_rel_s\":{i}}}\n");
    }
    text += "{\"type\":\"frame\",\"t_rel_s\":\"soon\"}\n";
    fs::write(&p, text).unwrap();
    let out = run(&["run", p.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 7"), "{err}");
}

#[test]
fn missing_file_exits_1_and_bad_usage_exits_2() {
    assert_eq!(code(&run(&["run", "/nonexistent/x.jsonl"])), 1);
    let scen = scenarios().join("household_fall.jsonl");
    assert_eq!(code(&run(&["run", scen.to_str().unwrap(), "--speed", "-1"])), 2);
    assert_eq!(code(&run(&["run", scen.to_str().unwrap(), "--backend", "bogus"])), 2);
}

#[test]
fn unreachable_backend_exits_3() {
    let scen = scenarios().join("household_fall.jsonl");
    let out = run(&["run", scen.to_str().unwrap(), "--backend", "remote:127.0.0.1:1"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn busy_port_exits_4() {
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    let scen = scenarios().join("household_fall.jsonl");
    let out = run(&["serve", scen.to_str().unwrap(), "--listen", &addr, "--max-idle-chunks", "0"]);
    assert_eq!(code(&out), 4);
}

#[test]
fn memdump_rebuilds_the_forest() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("mem.jsonl");
    let scen = scenarios().join("driver_fatigue.jsonl");
    let out = run(&["run", scen.to_str().unwrap(), "--memlog", log.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(fs::metadata(&log).unwrap().len() > 0);
    let a = run(&["memdump", log.to_str().unwrap()]);
    assert_eq!(code(&a), 0);
    let forest = String::from_utf8(a.stdout).unwrap();
    assert!(forest.contains("event") && forest.contains("segment"), "{forest}");
    let b = run(&["memdump", log.to_str().unwrap()]);
    assert_eq!(forest.as_bytes(), &b.stdout[..]);
}

#[test]
fn transcript_and_signal_files() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.jsonl");
    let s = dir.path().join("s.jsonl");
    let scen = scenarios().join("tutor_proactive.jsonl");
    let out = run(&["run", scen.to_str().unwrap(), "--transcript", t.to_str().unwrap(), "--signals", s.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(out.stdout.is_empty());
    assert_eq!(fs::read(&t).unwrap(), fs::read(scenarios().join("golden/tutor_proactive.transcript.jsonl")).unwrap());
    let signals = fs::read_to_string(&s).unwrap();
    assert!(signals.contains("<SILENT>") && signals.contains("<TRIG:"));
}
