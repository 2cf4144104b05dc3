//! `streamclaw` command.
//!
//! Exit codes: 0 ok, 1 I/O failure, 2 scenario or config error, 3 backend
//! failure, 4 listen address busy.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use streamclaw_core::backend::{BackendSelector, MockBackend};
use streamclaw_core::memory::{HmeParams, MemoryStore};
use streamclaw_cli::gateway::{serve, ServeOptions};
use streamclaw_cli::runner::{
    build_session, load_config, load_scenario, memlog_text, run_scenario, signals_text, source_name,
    transcript_text, write_file, RunError, RunOptions,
};

#[derive(Parser)]
#[command(name = "streamclaw", version, about = "Streaming video agent runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file (JSON lines).
    scenario: PathBuf,
    /// Runtime config (TOML). Defaults to `<scenario stem>.toml` when present.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Real-time multiplier; 0 replays as fast as possible.
    #[arg(long, default_value_t = 0.0)]
    speed: f64,
    /// `mock` or `remote:HOST:PORT`. Defaults to $STREAMCLAW_BACKEND, then mock.
    #[arg(long)]
    backend: Option<String>,
    /// Transcript output; stdout when omitted (run only).
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Proactive signal log, silent signals included.
    #[arg(long)]
    signals: Option<PathBuf>,
    /// Memory mutation log, readable by `memdump`.
    #[arg(long)]
    memlog: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Replays a scenario and writes its transcript.
    Run(Common),
    /// Replays a scenario behind the live gateway.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Listen address, e.g. 127.0.0.1:7000 (port 0 picks a free port).
        #[arg(long)]
        listen: String,
        /// Wall milliseconds per clock tick after the scenario ends.
        #[arg(long, default_value_t = 200)]
        idle_tick_ms: u64,
        /// Stop after this many idle ticks.
        #[arg(long)]
        max_idle_chunks: Option<u64>,
        /// Wait for this many clients before replaying.
        #[arg(long, default_value_t = 0)]
        wait_clients: usize,
        /// Start paused until a client sends `resume`.
        #[arg(long)]
        start_paused: bool,
    },
    /// Prints the memory forest rebuilt from a mutation log.
    Memdump { log: PathBuf },
}

fn selector(arg: &Option<String>) -> Result<BackendSelector, RunError> {
    match arg {
        Some(s) => s.parse(),
        None => BackendSelector::from_env(),
    }
    .map_err(RunError::Usage)
}

fn check_speed(speed: f64) -> Result<(), RunError> {
    if speed >= 0.0 && speed.is_finite() {
        Ok(())
    } else {
        Err(RunError::Usage(format!("speed must be a finite number >= 0, got {speed}")))
    }
}

fn run(c: Common) -> Result<(), RunError> {
    check_speed(c.speed)?;
    let opts = RunOptions {
        scenario: c.scenario,
        config: c.config,
        speed: c.speed,
        backend: selector(&c.backend)?,
        transcript: c.transcript.clone(),
        signals: c.signals,
        memlog: c.memlog,
    };
    let out = run_scenario(&opts)?;
    if c.transcript.is_none() {
        let mut stdout = std::io::stdout().lock();
        let _ = stdout.write_all(transcript_text(&out.transcript).as_bytes());
    }
    Ok(())
}

fn serve_cmd(c: Common, opts: ServeOptions) -> Result<(), RunError> {
    check_speed(c.speed)?;
    let cfg = load_config(c.config.as_deref(), &c.scenario)?;
    let timeline = load_scenario(&c.scenario)?;
    let backend = selector(&c.backend)?.build(cfg.kv.layers.clone());
    let opts = ServeOptions {
        queue_cap: cfg.gateway.queue_cap,
        ..opts
    };
    let session = build_session(cfg, backend, &source_name(&c.scenario))?.with_memory_journal();
    let mut session = serve(session, &c.scenario, &timeline, &opts, |addr| {
        println!("listening on {addr}");
        let _ = std::io::stdout().flush();
    })?;
    if let Some(p) = &c.transcript {
        write_file(p, &transcript_text(session.transcript()))?;
    }
    if let Some(p) = &c.signals {
        write_file(p, &signals_text(session.signals()))?;
    }
    if let Some(p) = &c.memlog {
        write_file(p, &memlog_text(&session.drain_memory_log()))?;
    }
    Ok(())
}

fn memdump(log: PathBuf) -> Result<(), RunError> {
    let f = File::open(&log).map_err(|e| RunError::Io {
        path: log.display().to_string(),
        message: e.to_string(),
    })?;
    let store = MemoryStore::replay(HmeParams::default(), std::sync::Arc::new(MockBackend::new()), BufReader::new(f))
        .map_err(|e| RunError::Usage(format!("{}: {e}", log.display())))?;
    print!("{}", store.render_forest());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run(c) => run(c),
        Command::Serve {
            common,
            listen,
            idle_tick_ms,
            max_idle_chunks,
            wait_clients,
            start_paused,
        } => {
            let opts = ServeOptions {
                listen,
                speed: common.speed,
                queue_cap: 0,
                idle_tick: Duration::from_millis(idle_tick_ms),
                max_idle_chunks,
                wait_clients,
                start_paused,
            };
            serve_cmd(common, opts)
        }
        Command::Memdump { log } => memdump(log),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
