//! Call-parse-execute-writeback loop.
//!
//! Each step asks the policy (a backend call) for output. A line of the form
//! `{"tool": ..., "args": {...}}` is a call; anything else is the final
//! answer. At most one call is taken per step. Unparseable call text gets one
//! retry, then the loop ends with an error. After `max_steps` policy calls the
//! loop stops with the partial results gathered so far.

use serde::Serialize;

use super::ToolCall;
use crate::backend::BackendError;

#[derive(Debug, Clone, PartialEq)]
pub enum AgentOutput {
    Call(ToolCall),
    Final(String),
    Unparseable(String),
}

/// Classifies one policy output.
pub fn parse_agent_output(text: &str) -> AgentOutput {
    for line in text.lines().map(str::trim) {
        if !line.starts_with('{') {
            continue;
        }
        let looks_like_call = line.contains("\"tool\"");
        match serde_json::from_str::<ToolCall>(line) {
            Ok(call) => return AgentOutput::Call(call),
            Err(_) if looks_like_call => return AgentOutput::Unparseable(line.to_string()),
            Err(_) => {}
        }
    }
    AgentOutput::Final(text.trim().to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub call: ToolCall,
    pub ok: bool,
    pub text: String,
}

/// What the policy sees at each step.
#[derive(Debug, Clone, Default)]
pub struct LoopState {
    pub step: usize,
    pub records: Vec<StepRecord>,
    /// Set when the previous output could not be parsed.
    pub retry_of: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopOutcome {
    /// Policy calls made.
    pub steps: usize,
    pub final_text: String,
    pub records: Vec<StepRecord>,
    pub forced: bool,
    pub error: Option<String>,
}

pub fn forced_answer(records: &[StepRecord]) -> String {
    let partial: Vec<&str> = records.iter().filter(|r| r.ok).map(|r| r.text.as_str()).collect();
    if partial.is_empty() {
        "Step limit reached without a result.".to_string()
    } else {
        format!("Step limit reached. Partial results: {}", partial.join(" | "))
    }
}

pub fn run_agentic_loop(
    max_steps: usize,
    policy: &mut dyn FnMut(&LoopState) -> Result<String, BackendError>,
    exec: &mut dyn FnMut(&ToolCall) -> Result<String, String>,
) -> LoopOutcome {
    let mut state = LoopState::default();
    loop {
        if state.step >= max_steps {
            return LoopOutcome {
                steps: state.step,
                final_text: forced_answer(&state.records),
                records: state.records,
                forced: true,
                error: None,
            };
        }
        state.step += 1;
        let output = match policy(&state) {
            Ok(o) => o,
            Err(e) => {
                return LoopOutcome {
                    steps: state.step,
                    final_text: String::new(),
                    records: state.records,
                    forced: false,
                    error: Some(e.to_string()),
                }
            }
        };
        match parse_agent_output(&output) {
            AgentOutput::Final(text) => {
                return LoopOutcome {
                    steps: state.step,
                    final_text: text,
                    records: state.records,
                    forced: false,
                    error: None,
                }
            }
            AgentOutput::Unparseable(line) => {
                if state.retry_of.is_some() {
                    return LoopOutcome {
                        steps: state.step,
                        final_text: String::new(),
                        records: state.records,
                        forced: false,
                        error: Some(format!("unparseable tool call: {line}")),
                    };
                }
                state.retry_of = Some(line);
            }
            AgentOutput::Call(call) => {
                state.retry_of = None;
                let (ok, text) = match exec(&call) {
                    Ok(t) => (true, t),
                    Err(e) => (false, e),
                };
                state.records.push(StepRecord { call, ok, text });
            }
        }
    }
}
