//! Reminder nodes, per-chunk trigger matching and the trigger-token signal
//! protocol.
//!
//! Objectives with a duration ("in 5 minutes") become time-aware nodes that
//! fire on the first chunk ending at or after the deadline. Anything else is
//! looked up in the configured condition table and becomes an event-grounding
//! node keyed on frame labels. Every checked chunk yields at least one
//! [`ProactiveSignal`]: the trigger tokens of the nodes that fired, or a
//! single [`SILENT`] token.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, GenerateRequest, Purpose};
use crate::stream::Chunk;

pub const SILENT: &str = "<SILENT>";
pub const TIME_AWARE_TOKEN: &str = "<TRIG:time_aware>";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProactiveError {
    #[error("could not derive a trigger condition from {0:?}")]
    UnparseableObjective(String),
    #[error("unknown reminder {0}")]
    UnknownReminder(u64),
    #[error("reminder {0} is cancelled")]
    Cancelled(u64),
    #[error("invalid trigger token {0:?}")]
    InvalidToken(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReminderKind {
    TimeAware,
    EventGrounding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReminderState {
    Armed,
    Fired,
    Cancelled,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recurrence {
    #[default]
    Once,
    Persistent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReminderNode {
    pub rid: u64,
    pub kind: ReminderKind,
    pub trigger_at_ms: Option<i64>,
    /// Original delay of a time-aware node; persistent nodes re-arm with it.
    pub period_ms: Option<i64>,
    pub condition_labels: BTreeSet<String>,
    pub condition_text: String,
    pub response_template: String,
    pub token: String,
    pub state: ReminderState,
    pub recurrence: Recurrence,
    /// Skill that owns this node, if any.
    pub skill: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProactiveSignal {
    pub token: String,
    pub rid: Option<u64>,
    pub t_abs_ms: i64,
    pub response_text: Option<String>,
}

impl ProactiveSignal {
    pub fn is_silent(&self) -> bool {
        self.token == SILENT
    }
}

/// Maps objective text to frame labels for event-grounding nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionRule {
    /// Case-insensitive substring of the objective.
    pub phrase: String,
    pub labels: Vec<String>,
    pub token: String,
    /// Response template; `{time}` and `{labels}` are substituted.
    pub template: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProactiveConfig {
    pub conditions: Vec<ConditionRule>,
    pub default_recurrence: Recurrence,
}

/// Parsed form of an objective, before it is bound to a rid.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub kind: ReminderKind,
    pub delay_ms: Option<i64>,
    pub condition_labels: BTreeSet<String>,
    pub condition_text: String,
    pub response_template: String,
    pub token: String,
}

fn is_valid_token(t: &str) -> bool {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^<TRIG:[a-z0-9_]+>$").expect("token regex"))
        .is_match(t)
}

fn duration_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)\bin\s+(\d+(?:\.\d+)?|an?|one|two|three|four|five|six|seven|eight|nine|ten|fifteen|twenty|thirty|sixty)\s+(seconds?|secs?|minutes?|mins?|hours?)\b",
        )
        .expect("duration regex")
    })
}

pub fn number_word(w: &str) -> Option<f64> {
    let n = match w.to_lowercase().as_str() {
        "a" | "an" | "one" => 1.0,
        "two" => 2.0,
        "three" => 3.0,
        "four" => 4.0,
        "five" => 5.0,
        "six" => 6.0,
        "seven" => 7.0,
        "eight" => 8.0,
        "nine" => 9.0,
        "ten" => 10.0,
        "fifteen" => 15.0,
        "twenty" => 20.0,
        "thirty" => 30.0,
        "sixty" => 60.0,
        other => return other.parse().ok(),
    };
    Some(n)
}

pub fn unit_ms(unit: &str) -> f64 {
    let u = unit.to_lowercase();
    if u.starts_with('h') {
        3_600_000.0
    } else if u.starts_with('m') {
        60_000.0
    } else {
        1000.0
    }
}

/// Finds an "in N <unit>" phrase. Returns the delay and the objective with
/// the phrase removed.
pub fn parse_delay(q: &str) -> Option<(i64, String)> {
    let caps = duration_regex().captures(q)?;
    let n = number_word(&caps[1])?;
    let delay = (n * unit_ms(&caps[2])).round() as i64;
    let whole = caps.get(0).expect("match");
    let rest = format!("{} {}", &q[..whole.start()], &q[whole.end()..]);
    Some((delay, rest.split_whitespace().collect::<Vec<_>>().join(" ")))
}

fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    let head = s.get(..prefix.len())?;
    head.eq_ignore_ascii_case(prefix).then(|| &s[prefix.len()..])
}

fn time_template(rest: &str) -> String {
    let r = rest.trim().trim_end_matches(['.', '!', '?', ',']).trim();
    if let Some(x) = strip_prefix_ci(r, "remind me to ") {
        format!("Time is up. Please get ready to {x}")
    } else if let Some(x) = strip_prefix_ci(r, "remind me of ") {
        format!("Time is up. Here is {x}: {{labels}}")
    } else if r.is_empty() {
        "Time is up.".to_string()
    } else {
        format!("Time is up: {r}")
    }
}

/// Substitutes `{time}` with the chunk end and `{labels}` with its caption.
pub fn render_template(template: &str, end_ms: i64, caption: &str) -> String {
    template.replace("{time}", &end_ms.to_string()).replace("{labels}", caption)
}

pub struct ProactiveEngine {
    cfg: ProactiveConfig,
    backend: Arc<dyn Backend>,
    nodes: BTreeMap<u64, ReminderNode>,
    next_rid: u64,
    tokens: BTreeSet<String>,
}

impl std::fmt::Debug for ProactiveEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProactiveEngine")
            .field("nodes", &self.nodes)
            .field("tokens", &self.tokens)
            .finish()
    }
}

impl ProactiveEngine {
    pub fn new(cfg: ProactiveConfig, backend: Arc<dyn Backend>) -> Result<Self, ProactiveError> {
        let mut tokens = BTreeSet::from([TIME_AWARE_TOKEN.to_string()]);
        for rule in &cfg.conditions {
            if !is_valid_token(&rule.token) {
                return Err(ProactiveError::InvalidToken(rule.token.clone()));
            }
            tokens.insert(rule.token.clone());
        }
        Ok(Self {
            cfg,
            backend,
            nodes: BTreeMap::new(),
            next_rid: 0,
            tokens,
        })
    }

    /// Registered non-silent tokens.
    pub fn tokens(&self) -> &BTreeSet<String> {
        &self.tokens
    }

    pub fn register_token(&mut self, token: &str) -> Result<(), ProactiveError> {
        if !is_valid_token(token) {
            return Err(ProactiveError::InvalidToken(token.to_string()));
        }
        self.tokens.insert(token.to_string());
        Ok(())
    }

    pub fn nodes(&self) -> impl Iterator<Item = &ReminderNode> {
        self.nodes.values()
    }

    pub fn node(&self, rid: u64) -> Option<&ReminderNode> {
        self.nodes.get(&rid)
    }

    pub fn parse_objective(&self, q: &str) -> Result<Objective, ProactiveError> {
        if let Some((delay, rest)) = parse_delay(q) {
            let response_template = if rest.is_empty() { String::new() } else { time_template(&rest) };
            return Ok(Objective {
                kind: ReminderKind::TimeAware,
                delay_ms: Some(delay),
                condition_labels: BTreeSet::new(),
                condition_text: rest,
                response_template,
                token: TIME_AWARE_TOKEN.to_string(),
            });
        }
        let lower = q.to_lowercase();
        let rule = self
            .cfg
            .conditions
            .iter()
            .find(|r| !r.phrase.is_empty() && lower.contains(&r.phrase.to_lowercase()))
            .ok_or_else(|| ProactiveError::UnparseableObjective(q.to_string()))?;
        Ok(Objective {
            kind: ReminderKind::EventGrounding,
            delay_ms: None,
            condition_labels: rule.labels.iter().cloned().collect(),
            condition_text: rule.phrase.clone(),
            response_template: rule.template.clone(),
            token: rule.token.clone(),
        })
    }

    fn insert(&mut self, o: Objective, t_now: i64, recurrence: Recurrence, skill: Option<String>) -> ReminderNode {
        let rid = self.next_rid;
        self.next_rid += 1;
        let node = ReminderNode {
            rid,
            kind: o.kind,
            trigger_at_ms: o.delay_ms.map(|d| t_now + d),
            period_ms: o.delay_ms,
            condition_labels: o.condition_labels,
            condition_text: o.condition_text,
            response_template: if o.response_template.is_empty() {
                "Time is up.".to_string()
            } else {
                o.response_template
            },
            token: o.token,
            state: ReminderState::Armed,
            recurrence,
            skill,
        };
        self.nodes.insert(rid, node.clone());
        node
    }

    pub fn create_reminder(&mut self, q: &str, t_now: i64) -> Result<ReminderNode, ProactiveError> {
        let o = self.parse_objective(q)?;
        let recurrence = self.cfg.default_recurrence;
        Ok(self.insert(o, t_now, recurrence, None))
    }

    /// Like [`Self::create_reminder`], but the node fires with `token`.
    pub fn create_reminder_with_token(&mut self, q: &str, t_now: i64, token: &str) -> Result<ReminderNode, ProactiveError> {
        self.register_token(token)?;
        let mut o = self.parse_objective(q)?;
        o.token = token.to_string();
        let recurrence = self.cfg.default_recurrence;
        Ok(self.insert(o, t_now, recurrence, None))
    }

    /// Persistent event node owned by a skill; fires whenever any label shows up.
    pub fn register_skill_trigger(
        &mut self,
        skill: &str,
        token: &str,
        labels: &[String],
        template: &str,
    ) -> Result<ReminderNode, ProactiveError> {
        self.register_token(token)?;
        let o = Objective {
            kind: ReminderKind::EventGrounding,
            delay_ms: None,
            condition_labels: labels.iter().cloned().collect(),
            condition_text: format!("skill:{skill}"),
            response_template: template.to_string(),
            token: token.to_string(),
        };
        Ok(self.insert(o, 0, Recurrence::Persistent, Some(skill.to_string())))
    }

    /// Re-parses the objective of an existing node in place. `cancel` cancels it.
    pub fn evolve_objective(&mut self, rid: u64, new_q: &str, t_now: i64) -> Result<ReminderNode, ProactiveError> {
        let node = self.nodes.get(&rid).ok_or(ProactiveError::UnknownReminder(rid))?;
        if node.state == ReminderState::Cancelled {
            return Err(ProactiveError::Cancelled(rid));
        }
        if new_q.trim().eq_ignore_ascii_case("cancel") {
            return self.cancel(rid);
        }
        let o = self.parse_objective(new_q)?;
        let node = self.nodes.get_mut(&rid).expect("checked");
        node.kind = o.kind;
        node.trigger_at_ms = o.delay_ms.map(|d| t_now + d);
        node.period_ms = o.delay_ms;
        node.condition_labels = o.condition_labels;
        if !o.condition_text.is_empty() {
            node.condition_text = o.condition_text;
        }
        if !o.response_template.is_empty() {
            node.response_template = o.response_template;
        }
        node.token = o.token;
        node.state = ReminderState::Armed;
        Ok(node.clone())
    }

    pub fn cancel(&mut self, rid: u64) -> Result<ReminderNode, ProactiveError> {
        let node = self.nodes.get_mut(&rid).ok_or(ProactiveError::UnknownReminder(rid))?;
        node.state = ReminderState::Cancelled;
        Ok(node.clone())
    }

    /// Renders the response for a node that fired on `c`. Backend failures
    /// fall back to the rendered template.
    pub fn respond(&self, node: &ReminderNode, c: &Chunk, caption: &str) -> String {
        let draft = render_template(&node.response_template, c.end_ms, caption);
        let req = GenerateRequest {
            purpose: Purpose::ProactiveResponse,
            prompt: format!("TEMPLATE:{}\nWINDOW:{}", node.response_template, caption),
            draft: draft.clone(),
        };
        self.backend.generate(&req).unwrap_or(draft)
    }

    /// Fires every armed node satisfied by `c`, in rid order.
    pub fn check_chunk(&mut self, c: &Chunk, caption: &str) -> Vec<ProactiveSignal> {
        let labels: BTreeSet<&str> = c.frames.iter().flat_map(|f| f.labels.iter().map(String::as_str)).collect();
        let fired: Vec<u64> = self
            .nodes
            .values()
            .filter(|n| n.state == ReminderState::Armed)
            .filter(|n| match n.kind {
                ReminderKind::TimeAware => n.trigger_at_ms.is_some_and(|t| c.end_ms >= t),
                ReminderKind::EventGrounding => n.condition_labels.iter().any(|l| labels.contains(l.as_str())),
            })
            .map(|n| n.rid)
            .collect();
        if fired.is_empty() {
            return vec![ProactiveSignal {
                token: SILENT.to_string(),
                rid: None,
                t_abs_ms: c.end_ms,
                response_text: None,
            }];
        }
        let mut signals = Vec::with_capacity(fired.len());
        for rid in fired {
            let text = self.respond(&self.nodes[&rid], c, caption);
            let node = self.nodes.get_mut(&rid).expect("fired node exists");
            match (node.recurrence, node.kind) {
                (Recurrence::Once, _) => node.state = ReminderState::Fired,
                (Recurrence::Persistent, ReminderKind::TimeAware) => {
                    let period = node.period_ms.unwrap_or(0).max(1);
                    let mut t = node.trigger_at_ms.unwrap_or(c.end_ms);
                    while t <= c.end_ms {
                        t += period;
                    }
                    node.trigger_at_ms = Some(t);
                }
                (Recurrence::Persistent, ReminderKind::EventGrounding) => {}
            }
            signals.push(ProactiveSignal {
                token: node.token.clone(),
                rid: Some(rid),
                t_abs_ms: c.end_ms,
                response_text: Some(text),
            });
        }
        signals
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;
    use crate::stream::{Density, FrameRecord};

    fn engine() -> ProactiveEngine {
        let cfg = ProactiveConfig {
            conditions: vec![ConditionRule {
                phrase: "a goal is scored".into(),
                labels: vec!["goal_scored".into()],
                token: "<TRIG:goal>".into(),
                template: "A goal has been scored. {labels}".into(),
            }],
            default_recurrence: Recurrence::Once,
        };
        ProactiveEngine::new(cfg, Arc::new(MockBackend::new())).unwrap()
    }

    fn chunk(start: i64, end: i64, labels: &[&str]) -> Chunk {
        Chunk {
            chunk_id: 0,
            start_ms: start,
            end_ms: end,
            frames: vec![FrameRecord::new(0, start, None).unwrap().with_labels(labels.iter().copied())],
            density: Density::Fast,
        }
    }

    #[test]
    fn time_aware_from_query() {
        let mut e = engine();
        let n = e.create_reminder("Remind me to get off in 5 minute", 0).unwrap();
        assert_eq!(n.kind, ReminderKind::TimeAware);
        assert_eq!(n.trigger_at_ms, Some(300_000));
        assert_eq!(n.response_template, "Time is up. Please get ready to get off");
        assert_eq!(n.token, TIME_AWARE_TOKEN);
    }

    #[test]
    fn delay_units_and_words() {
        assert_eq!(parse_delay("ping me in 30 seconds").unwrap().0, 30_000);
        assert_eq!(parse_delay("in two hours, call").unwrap().0, 7_200_000);
        assert_eq!(parse_delay("in a minute").unwrap().0, 60_000);
        assert_eq!(parse_delay("in 1.5 mins").unwrap().0, 90_000);
        assert!(parse_delay("in the kitchen").is_none());
    }

    #[test]
    fn remind_of_template_uses_caption() {
        let mut e = engine();
        let n = e
            .create_reminder("Remind me of the distance to the destination in 5 minutes", 1000)
            .unwrap();
        assert_eq!(n.trigger_at_ms, Some(301_000));
        let c = chunk(300_000, 302_000, &["km_12"]);
        assert_eq!(e.respond(&n, &c, "km_12"), "Time is up. Here is the distance to the destination: km_12");
    }

    #[test]
    fn event_grounding_and_unparseable() {
        let mut e = engine();
        let n = e.create_reminder("Tell me when a goal is scored", 0).unwrap();
        assert_eq!(n.kind, ReminderKind::EventGrounding);
        assert_eq!(n.condition_labels, BTreeSet::from(["goal_scored".to_string()]));
        assert_eq!(
            e.create_reminder("remind me when pigs fly", 0),
            Err(ProactiveError::UnparseableObjective("remind me when pigs fly".into()))
        );
    }

    #[test]
    fn boundary_and_exactly_once() {
        let mut e = engine();
        let n = e.create_reminder("Remind me to get off in 5 minute", 0).unwrap();
        let s = e.check_chunk(&chunk(298_000, 300_000 - 1, &[]), "");
        assert!(s[0].is_silent());
        let s = e.check_chunk(&chunk(298_000, 300_000, &[]), "");
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].rid, Some(n.rid));
        assert_eq!(s[0].response_text.as_deref(), Some("Time is up. Please get ready to get off"));
        assert!(e.check_chunk(&chunk(300_000, 302_000, &[]), "")[0].is_silent());
    }

    #[test]
    fn goal_template_substitution() {
        let mut e = engine();
        e.create_reminder("Tell me when a goal is scored", 0).unwrap();
        let s = e.check_chunk(&chunk(0, 2000, &["goal_scored"]), "goal_scored");
        assert_eq!(s[0].token, "<TRIG:goal>");
        assert_eq!(s[0].response_text.as_deref(), Some("A goal has been scored. goal_scored"));
        assert_eq!(render_template("{labels}", 5, "goal_scored"), "goal_scored");
        assert_eq!(render_template("at {time}", 5, ""), "at 5");
    }

    #[test]
    fn three_nodes_three_tokens() {
        let mut e = engine();
        e.create_reminder("Remind me in 1 second", 0).unwrap();
        e.create_reminder("a goal is scored", 0).unwrap();
        e.create_reminder("notify me if a goal is scored", 0).unwrap();
        let s = e.check_chunk(&chunk(0, 2000, &["goal_scored"]), "goal_scored");
        assert_eq!(s.iter().map(|x| x.rid.unwrap()).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn evolve_and_cancel() {
        let mut e = engine();
        let n = e.create_reminder("Remind me to stretch in 5 minute", 0).unwrap();
        let m = e.evolve_objective(n.rid, "in 2 minute", 60_000).unwrap();
        assert_eq!(m.rid, n.rid);
        assert_eq!(m.trigger_at_ms, Some(180_000));
        assert_eq!(m.response_template, "Time is up. Please get ready to stretch");
        assert!(matches!(e.evolve_objective(n.rid, "when pigs fly", 0), Err(ProactiveError::UnparseableObjective(_))));
        assert_eq!(e.node(n.rid).unwrap().trigger_at_ms, Some(180_000));

        e.evolve_objective(n.rid, "cancel", 0).unwrap();
        assert!(e.check_chunk(&chunk(400_000, 402_000, &[]), "")[0].is_silent());
        assert_eq!(e.evolve_objective(n.rid, "in 1 minute", 0), Err(ProactiveError::Cancelled(n.rid)));
        assert_eq!(e.evolve_objective(99, "in 1 minute", 0), Err(ProactiveError::UnknownReminder(99)));
    }

    #[test]
    fn evolve_fired_node_rearms() {
        let mut e = engine();
        let n = e.create_reminder("remind me in 2 seconds", 0).unwrap();
        assert!(!e.check_chunk(&chunk(0, 2000, &[]), "")[0].is_silent());
        e.evolve_objective(n.rid, "remind me in 2 seconds", 2000).unwrap();
        assert!(!e.check_chunk(&chunk(2000, 4000, &[]), "")[0].is_silent());
    }

    #[test]
    fn persistent_time_node_rearms_by_period() {
        let mut e = engine();
        e.cfg.default_recurrence = Recurrence::Persistent;
        e.create_reminder("remind me in 3 seconds", 0).unwrap();
        let fires: Vec<bool> = (0..6)
            .map(|i| !e.check_chunk(&chunk(i * 2000, (i + 1) * 2000, &[]), "")[0].is_silent())
            .collect();
        // deadlines 3000, 6000, 9000, 12000 → chunk ends 4000, 6000, 10000, 12000
        assert_eq!(fires, vec![false, true, true, false, true, true]);
    }

    #[test]
    fn invalid_tokens_rejected() {
        let mut e = engine();
        assert!(e.register_token("<SILENT>").is_err());
        assert!(e.register_token("<TRIG:Bad>").is_err());
        assert!(e.register_token("<TRIG:ok_1>").is_ok());
        assert!(e.tokens().contains("<TRIG:ok_1>"));
    }
}
