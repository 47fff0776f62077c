//! Per-task event log.
//!
//! Agents append [`Event`]s to a [`Trace`]. Probe workers get their own child
//! trace, merged back in probe order, so the final log does not depend on
//! thread interleaving. Without timestamps the written file is byte-stable.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::Clock;
use crate::types::RoleTag;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    TaskStart,
    SchemaLink,
    LlmCall,
    Plan,
    GeneratorTurn,
    ProbeOutcome,
    Evidence,
    PlannerDecision,
    Proposal,
    Verdict,
    ProposerResult,
    LimitHit,
    Fallback,
    TaskEnd,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub event: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<RoleTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<String>,
    pub payload: Json,
    #[serde(skip)]
    pub at_ms: Option<u64>,
}

/// Run statistics kept per task. Recursion flags are 0 or 1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub llm_calls: u64,
    pub output_tokens: u64,
    pub reasoning_tokens: u64,
    pub planner_calls: u64,
    pub parallel_plans: u64,
    pub probes_generated: u64,
    pub sql_executions: u64,
    pub semantic_verifications: u64,
    pub planner_recursion_hit: u64,
    pub generator_recursion_hit: u64,
    pub proposer_recursion_hit: u64,
    pub generator_turns: u64,
    pub proposer_turns: u64,
    pub verifier_calls: u64,
    pub schema_link_calls: u64,
}

impl Counters {
    pub fn merge(&mut self, o: &Counters) {
        self.llm_calls += o.llm_calls;
        self.output_tokens += o.output_tokens;
        self.reasoning_tokens += o.reasoning_tokens;
        self.planner_calls += o.planner_calls;
        self.parallel_plans = self.parallel_plans.max(o.parallel_plans);
        self.probes_generated += o.probes_generated;
        self.sql_executions += o.sql_executions;
        self.semantic_verifications += o.semantic_verifications;
        self.planner_recursion_hit |= o.planner_recursion_hit;
        self.generator_recursion_hit |= o.generator_recursion_hit;
        self.proposer_recursion_hit |= o.proposer_recursion_hit;
        self.generator_turns += o.generator_turns;
        self.proposer_turns += o.proposer_turns;
        self.verifier_calls += o.verifier_calls;
        self.schema_link_calls += o.schema_link_calls;
    }

    /// Output tokens that were not reasoning tokens.
    pub fn generation_tokens(&self) -> u64 {
        self.output_tokens.saturating_sub(self.reasoning_tokens)
    }

    pub fn to_map(&self) -> BTreeMap<String, u64> {
        let mut map: BTreeMap<String, u64> = match serde_json::to_value(self) {
            Ok(Json::Object(m)) => m.into_iter().filter_map(|(k, v)| v.as_u64().map(|n| (k, n))).collect(),
            _ => BTreeMap::new(),
        };
        map.insert("generation_tokens".into(), self.generation_tokens());
        map
    }

    /// llm_calls equals the sum of the per-agent call counts.
    pub fn is_conserved(&self) -> bool {
        self.llm_calls
            == self.planner_calls + self.generator_turns + self.proposer_turns + self.verifier_calls + self.schema_link_calls
    }
}

#[derive(Clone, Default)]
pub struct Trace {
    pub events: Vec<Event>,
    pub counters: Counters,
    clock: Option<Arc<dyn Clock>>,
}

impl std::fmt::Debug for Trace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trace").field("events", &self.events.len()).field("counters", &self.counters).finish()
    }
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stamps every event with the clock's time.
    pub fn timed(clock: Arc<dyn Clock>) -> Self {
        Trace { clock: Some(clock), ..Self::default() }
    }

    /// Empty trace sharing this one's clock.
    pub fn child(&self) -> Self {
        Trace { clock: self.clock.clone(), ..Self::default() }
    }

    pub fn push(&mut self, event: EventKind, role: Option<RoleTag>, probe: Option<&str>, payload: Json) {
        let at_ms = self.clock.as_ref().map(|c| c.now().as_millis() as u64);
        self.events.push(Event { event, role, probe: probe.map(str::to_string), payload, at_ms });
    }

    pub fn absorb(&mut self, other: Trace) {
        self.events.extend(other.events);
        self.counters.merge(&other.counters);
    }

    pub fn has(&self, kind: EventKind) -> bool {
        self.events.iter().any(|e| e.event == kind)
    }
}

/// Hex prefix of the SHA-256 of `bytes`.
pub fn digest(bytes: &[u8]) -> String {
    let full = Sha256::digest(bytes);
    hex::encode(&full[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts_ms: Option<u64>,
    pub event: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<RoleTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<String>,
    pub digest: String,
    pub payload: Json,
}

/// Writes `events` as JSON lines with sequence numbers and payload digests.
pub fn write_transcript<W: Write>(out: &mut W, events: &[Event], timestamps: bool) -> std::io::Result<()> {
    for (seq, e) in events.iter().enumerate() {
        let payload_text = serde_json::to_string(&e.payload)?;
        let line = TranscriptLine {
            seq: seq as u64,
            ts_ms: if timestamps { e.at_ms } else { None },
            event: e.event,
            role: e.role,
            probe: e.probe.clone(),
            digest: digest(payload_text.as_bytes()),
            payload: e.payload.clone(),
        };
        serde_json::to_writer(&mut *out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("transcript line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("transcript has no task_end event; the run was cut short or the file is truncated")]
    Truncated,
    #[error("cannot read transcript: {0}")]
    Io(#[from] std::io::Error),
}

pub fn read_transcript<R: BufRead>(input: R) -> Result<Vec<TranscriptLine>, TranscriptError> {
    let mut lines = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TranscriptLine = serde_json::from_str(&line)
            .map_err(|e| TranscriptError::Malformed { line: idx + 1, message: e.to_string() })?;
        if parsed.seq != lines.len() as u64 {
            return Err(TranscriptError::Malformed {
                line: idx + 1,
                message: format!("expected seq {}, found {}", lines.len(), parsed.seq),
            });
        }
        lines.push(parsed);
    }
    if lines.last().is_none_or(|l| l.event != EventKind::TaskEnd) {
        return Err(TranscriptError::Truncated);
    }
    Ok(lines)
}

fn text(v: &Json, key: &str) -> String {
    match v.get(key) {
        Some(Json::String(s)) => s.clone(),
        Some(Json::Null) | None => String::new(),
        Some(other) => other.to_string(),
    }
}

fn indent(s: &str, pad: &str) -> String {
    s.lines().map(|l| format!("{pad}{l}")).collect::<Vec<_>>().join("\n")
}

/// Human-readable report of a run's decision trace.
pub fn render_report(lines: &[TranscriptLine]) -> String {
    let mut out = String::new();
    let mut limits = Vec::new();
    for l in lines {
        let p = &l.payload;
        match l.event {
            EventKind::TaskStart => {
                let _ = writeln!(out, "Task {} on {}", text(p, "instance_id"), text(p, "db_id"));
                let _ = writeln!(out, "  question: {}", text(p, "question"));
            }
            EventKind::SchemaLink => {
                let tables: Vec<String> = p
                    .get("tables")
                    .and_then(Json::as_array)
                    .map(|a| a.iter().filter_map(|t| t.as_str().map(str::to_string)).collect())
                    .unwrap_or_default();
                let _ = writeln!(out, "Schema ({}): {}", text(p, "source"), tables.join(", "));
            }
            EventKind::Plan => {
                let _ = writeln!(out, "Plan round {}:", text(p, "round"));
                for probe in p.get("probes").and_then(Json::as_array).into_iter().flatten() {
                    let _ = writeln!(out, "  [{}] {}", text(probe, "probe_id"), text(probe, "text"));
                }
            }
            EventKind::GeneratorTurn => {
                let _ = writeln!(out, "  {} turn {}:", l.probe.as_deref().unwrap_or("?"), text(p, "turn"));
                for (i, c) in p.get("candidates").and_then(Json::as_array).into_iter().flatten().enumerate() {
                    let tag = if c.get("exploration").and_then(Json::as_bool) == Some(true) { " (exploration)" } else { "" };
                    let _ = writeln!(out, "    [{}]{} {} -> {}", i + 1, tag, text(c, "sql"), text(c, "kind"));
                }
            }
            EventKind::ProbeOutcome => {
                let fin = text(p, "final");
                let _ = writeln!(
                    out,
                    "  {} {}{}",
                    l.probe.as_deref().unwrap_or("?"),
                    text(p, "status"),
                    if fin.is_empty() { String::new() } else { format!(": {fin}") }
                );
            }
            EventKind::Evidence => {
                let _ = writeln!(out, "Evidence clusters:");
                for name in ["exploratory", "failures", "successes", "finals"] {
                    let entries = p.get(name).and_then(Json::as_array).cloned().unwrap_or_default();
                    let _ = writeln!(out, "  {name}: {}", entries.len());
                    for e in entries {
                        let _ = writeln!(out, "    - [{}] {}", text(&e, "probe_id"), text(&e, "sql"));
                    }
                }
            }
            EventKind::PlannerDecision => {
                let _ = writeln!(out, "Planner decision: {}", text(p, "decision"));
                let note = text(p, "note");
                if !note.is_empty() {
                    let _ = writeln!(out, "  note: {note}");
                }
            }
            EventKind::Proposal => {
                let _ = writeln!(out, "Proposal turn {}: {}", text(p, "turn"), text(p, "kind"));
                let _ = writeln!(out, "{}", indent(&text(p, "sql"), "    "));
            }
            EventKind::Verdict => {
                let _ = writeln!(out, "  verdict: correct={} ({})", text(p, "correct"), text(p, "explanation"));
            }
            EventKind::ProposerResult => {
                let _ = writeln!(out, "Proposer result: succeeded={} after {} turn(s)", text(p, "succeeded"), text(p, "iterations_used"));
            }
            EventKind::LimitHit => {
                let agent = text(p, "agent");
                let _ = writeln!(
                    out,
                    "LIMIT HIT: {agent}{}",
                    l.probe.as_deref().map(|pr| format!(" ({pr})")).unwrap_or_default()
                );
                limits.push(agent);
            }
            EventKind::Fallback => {
                let _ = writeln!(out, "Fallback: {} -> {}", text(p, "source"), text(p, "sql"));
            }
            EventKind::Error => {
                let _ = writeln!(out, "ERROR: {}", text(p, "message"));
            }
            EventKind::TaskEnd => {
                let _ = writeln!(out, "Result: succeeded={}", text(p, "succeeded"));
                let sql = text(p, "final_sql");
                if !sql.is_empty() {
                    let _ = writeln!(out, "{}", indent(&sql, "    "));
                }
            }
            EventKind::LlmCall => {}
        }
    }
    let calls = lines.iter().filter(|l| l.event == EventKind::LlmCall).count();
    let _ = writeln!(out, "Model calls: {calls}");
    if !limits.is_empty() {
        let _ = writeln!(out, "Recursion limits reached: {}", limits.join(", "));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Vec<Event> {
        let mut t = Trace::new();
        t.push(EventKind::TaskStart, None, None, json!({"instance_id": "t1", "db_id": "shop", "question": "q"}));
        t.push(EventKind::LimitHit, Some(RoleTag::Propose), None, json!({"agent": "proposer"}));
        t.push(EventKind::TaskEnd, None, None, json!({"succeeded": false, "final_sql": "SELECT 1"}));
        t.events
    }

    #[test]
    fn write_then_read() {
        let mut buf = Vec::new();
        write_transcript(&mut buf, &sample(), false).unwrap();
        let lines = read_transcript(buf.as_slice()).unwrap();
        assert_eq!(lines.len(), 3);
        let report = render_report(&lines);
        assert!(report.contains("LIMIT HIT: proposer"), "{report}");
    }

    #[test]
    fn truncated_file_rejected() {
        let mut buf = Vec::new();
        write_transcript(&mut buf, &sample()[..2], false).unwrap();
        assert!(matches!(read_transcript(buf.as_slice()), Err(TranscriptError::Truncated)));
        let cut = &buf[..buf.len() - 10];
        assert!(matches!(read_transcript(cut), Err(TranscriptError::Malformed { .. })));
    }

    #[test]
    fn counters_merge_and_conserve() {
        let mut a = Counters { llm_calls: 2, planner_calls: 1, generator_turns: 1, parallel_plans: 3, ..Default::default() };
        let b = Counters { llm_calls: 1, verifier_calls: 1, parallel_plans: 2, proposer_recursion_hit: 1, ..Default::default() };
        a.merge(&b);
        assert!(a.is_conserved());
        assert_eq!(a.parallel_plans, 3);
        assert_eq!(a.to_map()["proposer_recursion_hit"], 1);
        assert!(a.to_map().contains_key("generation_tokens"));
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(digest(b"abc"), "ba7816bf8f01cfea");
    }
}
