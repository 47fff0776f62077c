//! Deterministic replay backend driven by a JSON-lines script.
//!
//! Each record is one reply for a role. Records may also name a `task` and a
//! `probe`, which makes replay independent of scheduling order when several
//! tasks or probes share one script. A request is served from the most
//! specific queue that the script defines:
//! `(role, task, probe)`, `(role, task)`, `(role, probe)`, then `(role)`.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, Clock, SystemClock, ToolCall, Usage};
use crate::types::RoleTag;

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("cannot read script {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("script line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScriptedFailure {
    Transient,
    Timeout,
    Fatal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRecord {
    pub role_tag: RoleTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
    /// Replays a failure instead of a reply.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ScriptedFailure>,
}

impl ScriptRecord {
    pub fn reply(role_tag: RoleTag, text: impl Into<String>) -> Self {
        ScriptRecord {
            role_tag,
            task: None,
            probe: None,
            text: Some(text.into()),
            tool_calls: Vec::new(),
            latency_ms: 0,
            usage: None,
            error: None,
        }
    }

    pub fn tool(role_tag: RoleTag, name: &str, arguments: Json) -> Self {
        ScriptRecord {
            text: None,
            tool_calls: vec![ToolCall { name: name.into(), arguments }],
            ..ScriptRecord::reply(role_tag, "")
        }
    }

    pub fn failure(role_tag: RoleTag, failure: ScriptedFailure) -> Self {
        ScriptRecord { text: None, error: Some(failure), ..ScriptRecord::reply(role_tag, "") }
    }

    pub fn for_task(mut self, task: &str) -> Self {
        self.task = Some(task.into());
        self
    }

    pub fn for_probe(mut self, probe: &str) -> Self {
        self.probe = Some(probe.into());
        self
    }

    pub fn with_latency(mut self, ms: u64) -> Self {
        self.latency_ms = ms;
        self
    }
}

type QueueKey = (RoleTag, Option<String>, Option<String>);

pub struct ScriptedBackend {
    queues: Mutex<HashMap<QueueKey, VecDeque<ScriptRecord>>>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let queues = self.queues.lock().unwrap_or_else(|e| e.into_inner());
        f.debug_struct("ScriptedBackend").field("queues", &queues.len()).finish()
    }
}

/// Parses a script file. Blank lines are skipped.
pub fn load_script(path: &Path) -> Result<ScriptedBackend, ScriptError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ScriptError::Io { path: path.display().to_string(), source })?;
    ScriptedBackend::parse(&text)
}

impl ScriptedBackend {
    pub fn new(records: impl IntoIterator<Item = ScriptRecord>) -> Self {
        let mut queues: HashMap<QueueKey, VecDeque<ScriptRecord>> = HashMap::new();
        for r in records {
            queues.entry((r.role_tag, r.task.clone(), r.probe.clone())).or_default().push_back(r);
        }
        ScriptedBackend { queues: Mutex::new(queues), clock: Arc::new(SystemClock::new()) }
    }

    pub fn parse(text: &str) -> Result<Self, ScriptError> {
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ScriptRecord =
                serde_json::from_str(line).map_err(|e| ScriptError::Parse { line: idx + 1, message: e.to_string() })?;
            records.push(rec);
        }
        Ok(Self::new(records))
    }

    /// Scripted latency is spent on this clock.
    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    /// Replies still queued across all keys.
    pub fn remaining(&self) -> usize {
        self.queues.lock().unwrap_or_else(|e| e.into_inner()).values().map(VecDeque::len).sum()
    }

    fn next_record(&self, req: &ChatRequest) -> Option<ScriptRecord> {
        let task = Some(req.scope.task.clone());
        let probe = req.scope.probe.clone();
        let candidates: [QueueKey; 4] = [
            (req.role_tag, task.clone(), probe.clone()),
            (req.role_tag, task, None),
            (req.role_tag, None, probe),
            (req.role_tag, None, None),
        ];
        let mut queues = self.queues.lock().unwrap_or_else(|e| e.into_inner());
        let key = candidates.into_iter().find(|k| queues.contains_key(k))?;
        queues.get_mut(&key).and_then(VecDeque::pop_front)
    }
}

fn approx_tokens(s: &str) -> u64 {
    (s.chars().count() as u64).div_ceil(4)
}

impl ChatBackend for ScriptedBackend {
    fn chat(&self, req: &ChatRequest, timeout: Duration) -> Result<ChatResponse, BackendError> {
        let Some(rec) = self.next_record(req) else {
            return Err(BackendError::ScriptExhausted { role: req.role_tag, scope: req.scope.to_string() });
        };
        let latency = Duration::from_millis(rec.latency_ms);
        if latency > timeout {
            self.clock.sleep(timeout);
            return Err(BackendError::Timeout(timeout));
        }
        self.clock.sleep(latency);
        match rec.error {
            Some(ScriptedFailure::Transient) => return Err(BackendError::Transient("scripted transient failure".into())),
            Some(ScriptedFailure::Timeout) => return Err(BackendError::Timeout(timeout)),
            Some(ScriptedFailure::Fatal) => return Err(BackendError::Fatal("scripted fatal failure".into())),
            None => {}
        }
        let usage = rec.usage.unwrap_or_else(|| {
            let prompt: u64 = req.messages.iter().map(|m| approx_tokens(&m.content)).sum();
            let completion = approx_tokens(rec.text.as_deref().unwrap_or(""))
                + rec.tool_calls.iter().map(|c| approx_tokens(&c.arguments.to_string()) + 1).sum::<u64>();
            Usage { prompt_tokens: prompt, completion_tokens: completion, reasoning_tokens: 0 }
        });
        Ok(ChatResponse { text: rec.text, tool_calls: rec.tool_calls, usage, latency })
    }
}
