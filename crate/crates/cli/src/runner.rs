//! Scenario replay for the `run` command.
//!
//! Without `--config`, a `<stem>.toml` next to the scenario is used when it
//! exists; otherwise the defaults apply.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use streamclaw_core::backend::{Backend, BackendSelector};
use streamclaw_core::config::{ConfigError, RuntimeConfig};
use streamclaw_core::memory::Mutation;
use streamclaw_core::proactive::ProactiveSignal;
use streamclaw_core::scenario::{load_timeline, ScenarioError, TimedLine};
use streamclaw_core::session::{ChunkTrace, OutEvent, RouteRecord, Session, SessionError, StatsView};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Scenario { path: String, source: ScenarioError },
    #[error("{path}: line {line}: {source}")]
    Input { path: String, line: usize, source: SessionError },
    #[error("backend failure: {0}")]
    Backend(SessionError),
    #[error("{0}")]
    Setup(SessionError),
    #[error("cannot listen on {addr}: {message}")]
    Bind { addr: String, message: String },
    #[error("{0}")]
    Usage(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Scenario { .. } | RunError::Input { .. } | RunError::Setup(_) | RunError::Usage(_) => 2,
            RunError::Backend(_) => 3,
            RunError::Bind { .. } => 4,
            RunError::Io { .. } => 1,
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> RunError {
    RunError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub scenario: PathBuf,
    pub config: Option<PathBuf>,
    /// Real-time multiplier; 0 replays as fast as possible.
    pub speed: f64,
    pub backend: BackendSelector,
    pub transcript: Option<PathBuf>,
    pub signals: Option<PathBuf>,
    pub memlog: Option<PathBuf>,
}

impl RunOptions {
    pub fn new(scenario: impl Into<PathBuf>) -> Self {
        Self {
            scenario: scenario.into(),
            config: None,
            speed: 0.0,
            backend: BackendSelector::Mock,
            transcript: None,
            signals: None,
            memlog: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub transcript: Vec<OutEvent>,
    pub signals: Vec<ProactiveSignal>,
    pub memlog: Vec<Mutation>,
    pub traces: Vec<ChunkTrace>,
    pub routes: Vec<RouteRecord>,
    pub stats: StatsView,
}

/// Explicit config, else the scenario's sibling `<stem>.toml`, else defaults.
pub fn load_config(explicit: Option<&Path>, scenario: &Path) -> Result<RuntimeConfig, RunError> {
    if let Some(p) = explicit {
        return Ok(RuntimeConfig::load(p)?);
    }
    let sibling = scenario.with_extension("toml");
    if sibling.is_file() {
        return Ok(RuntimeConfig::load(&sibling)?);
    }
    Ok(RuntimeConfig::default())
}

pub fn load_scenario(path: &Path) -> Result<Vec<TimedLine>, RunError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    load_timeline(&text).map_err(|source| RunError::Scenario {
        path: path.display().to_string(),
        source,
    })
}

/// Source name used by `video_cut` for the scenario stream.
pub fn source_name(scenario: &Path) -> String {
    scenario
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "stream".to_string())
}

pub fn build_session(cfg: RuntimeConfig, backend: Arc<dyn Backend>, source: &str) -> Result<Session, RunError> {
    Session::new(cfg, backend, source).map_err(RunError::Setup)
}

/// Maps a failure while feeding `line` to the right exit class.
pub fn feed_error(path: &Path, line: usize, e: SessionError) -> RunError {
    match e {
        SessionError::Backend(_) => RunError::Backend(e),
        other => RunError::Input {
            path: path.display().to_string(),
            line,
            source: other,
        },
    }
}

/// Replays the timeline into `session`, paced by `speed`, and closes it.
pub fn replay(session: &mut Session, path: &Path, timeline: &[TimedLine], speed: f64) -> Result<(), RunError> {
    let start = Instant::now();
    let t0 = timeline.first().map(|l| l.event.t_abs_ms());
    for l in timeline {
        if let (Some(t0), true) = (t0, speed > 0.0) {
            let due = Duration::from_secs_f64((l.event.t_abs_ms() - t0) as f64 / 1000.0 / speed);
            if let Some(wait) = due.checked_sub(start.elapsed()) {
                thread::sleep(wait);
            }
        }
        session.feed(&l.event).map_err(|e| feed_error(path, l.line, e))?;
    }
    if let Some(last) = timeline.last() {
        session
            .finish(last.event.t_abs_ms())
            .map_err(|e| feed_error(path, last.line, e))?;
    }
    Ok(())
}

pub fn lines<T, F: Fn(&T) -> String>(items: &[T], f: F) -> String {
    items.iter().map(|x| f(x) + "\n").collect()
}

pub fn transcript_text(events: &[OutEvent]) -> String {
    lines(events, OutEvent::to_line)
}

pub fn signals_text(signals: &[ProactiveSignal]) -> String {
    lines(signals, |s| serde_json::to_string(s).expect("signal serializes"))
}

pub fn memlog_text(log: &[Mutation]) -> String {
    lines(log, Mutation::to_line)
}

pub fn write_file(path: &Path, text: &str) -> Result<(), RunError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Runs a scenario end to end and writes the requested logs.
pub fn run_scenario(opts: &RunOptions) -> Result<RunOutput, RunError> {
    let cfg = load_config(opts.config.as_deref(), &opts.scenario)?;
    let timeline = load_scenario(&opts.scenario)?;
    let backend = opts.backend.build(cfg.kv.layers.clone());
    let mut session = build_session(cfg, backend, &source_name(&opts.scenario))?.with_memory_journal();
    replay(&mut session, &opts.scenario, &timeline, opts.speed)?;
    let out = RunOutput {
        transcript: session.transcript().to_vec(),
        signals: session.signals().to_vec(),
        memlog: session.drain_memory_log(),
        traces: session.traces().to_vec(),
        routes: session.routes().to_vec(),
        stats: session.stats_view(),
    };
    if let Some(p) = &opts.transcript {
        write_file(p, &transcript_text(&out.transcript))?;
    }
    if let Some(p) = &opts.signals {
        write_file(p, &signals_text(&out.signals))?;
    }
    if let Some(p) = &opts.memlog {
        write_file(p, &memlog_text(&out.memlog))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn empty_scenario_gives_empty_transcript() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_scenario(&RunOptions::new(write(dir.path(), "e.jsonl", ""))).unwrap();
        assert!(out.transcript.is_empty());
        assert!(out.signals.is_empty());
    }

    #[test]
    fn parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let text = "{\"type\":\"anchor\",\"device_rel_s\":0,\"abs_ms\":0}\n{\"type\":\"frame\",\"t_rel_s\":0.1}\n{oops\n";
        let err = run_scenario(&RunOptions::new(write(dir.path(), "bad.jsonl", text))).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn sibling_config_is_picked_up() {
        let dir = tempfile::tempdir().unwrap();
        let scen = write(dir.path(), "s.jsonl", "");
        write(dir.path(), "s.toml", "chunk_seconds = 0.5\n");
        assert_eq!(load_config(None, &scen).unwrap().chunk_seconds, 0.5);
        write(dir.path(), "s.toml", "chunk_seconds = \"x\"\n");
        assert_eq!(load_config(None, &scen).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn unreachable_backend_exits_3() {
        let dir = tempfile::tempdir().unwrap();
        let text = "{\"type\":\"anchor\",\"device_rel_s\":0,\"abs_ms\":0}\n{\"type\":\"frame\",\"t_rel_s\":0.1}\n{\"type\":\"frame\",\"t_rel_s\":5.0}\n";
        let mut opts = RunOptions::new(write(dir.path(), "r.jsonl", text));
        opts.backend = BackendSelector::Remote("127.0.0.1:1".into());
        assert_eq!(run_scenario(&opts).unwrap_err().exit_code(), 3);
    }
}
