//! Model-backend contract shared by every agent.
//!
//! [`Gateway::complete`] applies the run-wide policies on top of a
//! [`ChatBackend`]: one global throttle, per-attempt timeouts, retries with
//! jittered exponential backoff, and response validation against the tool
//! schemas offered in the request.

mod clock;
mod http;
mod scripted;
mod throttle;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

pub use clock::{Clock, ManualClock, SystemClock};
pub use http::HttpBackend;
pub use scripted::{load_script, ScriptError, ScriptRecord, ScriptedBackend, ScriptedFailure};
pub use throttle::{RetryPolicy, Throttle};

use crate::config::RunConfig;
use crate::types::RoleTag;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub speaker: Speaker,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message { speaker: Speaker::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Message { speaker: Speaker::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Message { speaker: Speaker::Assistant, content: content.into() }
    }
    pub fn tool(content: impl Into<String>) -> Self {
        Message { speaker: Speaker::Tool, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    String,
    Integer,
    Boolean,
    Array(Box<ParamKind>),
    Object(Vec<ParamSpec>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub description: String,
    pub kind: ParamKind,
    pub required: bool,
}

impl ParamSpec {
    pub fn new(name: &str, kind: ParamKind, required: bool, description: &str) -> Self {
        ParamSpec { name: name.into(), description: description.into(), kind, required }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub parameters: Vec<ParamSpec>,
}

impl ToolSchema {
    pub fn new(name: &str, description: &str, parameters: Vec<ParamSpec>) -> Self {
        ToolSchema { name: name.into(), description: description.into(), parameters }
    }

    /// JSON-schema rendering used by HTTP backends.
    pub fn json_schema(&self) -> Json {
        object_schema(&self.parameters)
    }

    /// Checks `arguments` against the declared parameters.
    pub fn check_arguments(&self, arguments: &Json) -> Result<(), String> {
        check_object(&self.parameters, arguments, &self.name)
    }
}

fn kind_schema(kind: &ParamKind) -> Json {
    match kind {
        ParamKind::String => serde_json::json!({"type": "string"}),
        ParamKind::Integer => serde_json::json!({"type": "integer"}),
        ParamKind::Boolean => serde_json::json!({"type": "boolean"}),
        ParamKind::Array(inner) => serde_json::json!({"type": "array", "items": kind_schema(inner)}),
        ParamKind::Object(fields) => object_schema(fields),
    }
}

fn object_schema(fields: &[ParamSpec]) -> Json {
    let mut props = serde_json::Map::new();
    for p in fields {
        let mut s = kind_schema(&p.kind);
        if let Json::Object(m) = &mut s {
            m.insert("description".into(), Json::String(p.description.clone()));
        }
        props.insert(p.name.clone(), s);
    }
    let required: Vec<Json> = fields.iter().filter(|p| p.required).map(|p| Json::String(p.name.clone())).collect();
    serde_json::json!({"type": "object", "properties": props, "required": required})
}

fn check_object(fields: &[ParamSpec], value: &Json, path: &str) -> Result<(), String> {
    let Json::Object(map) = value else {
        return Err(format!("{path}: expected an object"));
    };
    for f in fields {
        match map.get(&f.name) {
            None | Some(Json::Null) if f.required => return Err(format!("{path}.{}: missing required field", f.name)),
            None | Some(Json::Null) => {}
            Some(v) => check_kind(&f.kind, v, &format!("{path}.{}", f.name))?,
        }
    }
    Ok(())
}

fn check_kind(kind: &ParamKind, value: &Json, path: &str) -> Result<(), String> {
    let ok = match kind {
        ParamKind::String => value.is_string(),
        ParamKind::Integer => value.is_i64() || value.is_u64(),
        ParamKind::Boolean => value.is_boolean(),
        ParamKind::Array(inner) => {
            let Json::Array(items) = value else {
                return Err(format!("{path}: expected an array"));
            };
            for (i, item) in items.iter().enumerate() {
                check_kind(inner, item, &format!("{path}[{i}]"))?;
            }
            true
        }
        ParamKind::Object(fields) => return check_object(fields, value, path),
    };
    if ok {
        Ok(())
    } else {
        Err(format!("{path}: wrong type"))
    }
}

/// Which task (and probe) a call belongs to. Scripted backends key replies on it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CallScope {
    pub task: String,
    pub probe: Option<String>,
}

impl CallScope {
    pub fn task(task: impl Into<String>) -> Self {
        CallScope { task: task.into(), probe: None }
    }

    pub fn probe(task: impl Into<String>, probe: impl Into<String>) -> Self {
        CallScope { task: task.into(), probe: Some(probe.into()) }
    }
}

impl fmt::Display for CallScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.probe {
            Some(p) => write!(f, "{}/{}", self.task, p),
            None => f.write_str(&self.task),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub role_tag: RoleTag,
    pub messages: Vec<Message>,
    pub tools: Vec<ToolSchema>,
    pub temperature: f64,
    pub model_id: String,
    pub scope: CallScope,
}

impl ChatRequest {
    /// Builds a request with temperature and model routed by role.
    pub fn for_role(
        cfg: &RunConfig,
        role_tag: RoleTag,
        scope: CallScope,
        messages: Vec<Message>,
        tools: Vec<ToolSchema>,
    ) -> Self {
        ChatRequest {
            role_tag,
            messages,
            tools,
            temperature: cfg.temperature_for(role_tag),
            model_id: cfg.model_for(role_tag).to_string(),
            scope,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.messages.first() {
            None => return Err("request has no messages".into()),
            Some(m) if m.speaker != Speaker::System => return Err("first message must come from the system".into()),
            _ => {}
        }
        let mut names = HashSet::new();
        for t in &self.tools {
            if !names.insert(t.name.as_str()) {
                return Err(format!("tool `{}` declared twice", t.name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    #[serde(default)]
    pub arguments: Json,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
    #[serde(default)]
    pub reasoning_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: Option<String>,
    pub tool_calls: Vec<ToolCall>,
    pub usage: Usage,
    pub latency: Duration,
}

impl ChatResponse {
    pub fn text(&self) -> &str {
        self.text.as_deref().unwrap_or("")
    }

    pub fn calls_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a ToolCall> + 'a {
        self.tool_calls.iter().filter(move |c| c.name == name)
    }

    /// Transcript-friendly rendering of the reply.
    pub fn render(&self) -> String {
        let mut out = self.text().trim().to_string();
        for call in &self.tool_calls {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("[tool call] {}({})", call.name, call.arguments));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("attempt timed out after {0:?}")]
    Timeout(Duration),
    #[error("script exhausted for {role} call in {scope}")]
    ScriptExhausted { role: RoleTag, scope: String },
    #[error("backend returned an unparseable response: {0}")]
    Malformed(String),
    #[error("backend error: {0}")]
    Fatal(String),
}

impl BackendError {
    fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transient(_) | BackendError::Timeout(_))
    }
}

/// A model provider. Implementations must honour `timeout` per call.
pub trait ChatBackend: Send + Sync {
    fn chat(&self, req: &ChatRequest, timeout: Duration) -> Result<ChatResponse, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no backend configured for model `{0}`")]
    UnknownModel(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("script exhausted: {0}")]
    ScriptExhausted(String),
    #[error("backend failure: {0}")]
    Backend(String),
}

/// Run-wide usage totals.
#[derive(Debug, Default)]
pub struct Telemetry {
    requests: AtomicU64,
    attempts: AtomicU64,
    retries: AtomicU64,
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
    reasoning_tokens: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TelemetrySnapshot {
    pub requests: u64,
    pub attempts: u64,
    pub retries: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub reasoning_tokens: u64,
}

impl Telemetry {
    pub fn snapshot(&self) -> TelemetrySnapshot {
        TelemetrySnapshot {
            requests: self.requests.load(Ordering::Relaxed),
            attempts: self.attempts.load(Ordering::Relaxed),
            retries: self.retries.load(Ordering::Relaxed),
            prompt_tokens: self.prompt_tokens.load(Ordering::Relaxed),
            completion_tokens: self.completion_tokens.load(Ordering::Relaxed),
            reasoning_tokens: self.reasoning_tokens.load(Ordering::Relaxed),
        }
    }
}

pub struct Gateway {
    backends: HashMap<String, Arc<dyn ChatBackend>>,
    fallback: Option<Arc<dyn ChatBackend>>,
    clock: Arc<dyn Clock>,
    throttle: Throttle,
    retry: RetryPolicy,
    timeout: Duration,
    jitter: Mutex<ChaCha8Rng>,
    telemetry: Telemetry,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("models", &self.backends.keys().collect::<Vec<_>>())
            .field("throttle", &self.throttle)
            .field("retry", &self.retry)
            .field("timeout", &self.timeout)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    /// Gateway serving every model id from `backend`, with policies from `cfg`.
    pub fn new(backend: Arc<dyn ChatBackend>, cfg: &RunConfig, clock: Arc<dyn Clock>) -> Self {
        Gateway {
            backends: HashMap::new(),
            fallback: Some(backend),
            clock,
            throttle: Throttle::new(cfg.requests_per_second),
            retry: RetryPolicy {
                max_retries: cfg.max_retries,
                base: Duration::from_millis(cfg.backoff_base_millis),
                cap: Duration::from_millis(cfg.backoff_cap_millis),
            },
            timeout: cfg.request_timeout(),
            jitter: Mutex::new(ChaCha8Rng::seed_from_u64(cfg.seed)),
            telemetry: Telemetry::default(),
        }
    }

    /// Routes `model_id` to a dedicated backend.
    pub fn with_model(mut self, model_id: impl Into<String>, backend: Arc<dyn ChatBackend>) -> Self {
        self.backends.insert(model_id.into(), backend);
        self
    }

    /// Drops the catch-all backend so only explicitly routed models resolve.
    pub fn without_fallback(mut self) -> Self {
        self.fallback = None;
        self
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        self.retry
    }

    pub fn telemetry(&self) -> TelemetrySnapshot {
        self.telemetry.snapshot()
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate().map_err(GatewayError::InvalidRequest)?;
        let backend = self
            .backends
            .get(&req.model_id)
            .or(self.fallback.as_ref())
            .ok_or_else(|| GatewayError::UnknownModel(req.model_id.clone()))?;
        self.telemetry.requests.fetch_add(1, Ordering::Relaxed);

        let mut retry = 0u32;
        loop {
            self.throttle.acquire(self.clock.as_ref());
            self.telemetry.attempts.fetch_add(1, Ordering::Relaxed);
            let err = match backend.chat(req, self.timeout) {
                Ok(resp) => {
                    validate_response(req, &resp).map_err(GatewayError::MalformedResponse)?;
                    self.record_usage(resp.usage);
                    return Ok(resp);
                }
                Err(e) => e,
            };
            match err {
                e if e.is_retryable() => {
                    if retry >= self.retry.max_retries {
                        return Err(GatewayError::RetriesExhausted { attempts: retry + 1, last: e.to_string() });
                    }
                    let delay = {
                        let mut rng = self.jitter.lock().unwrap_or_else(|p| p.into_inner());
                        self.retry.delay(retry, &mut *rng)
                    };
                    self.clock.sleep(delay);
                    self.telemetry.retries.fetch_add(1, Ordering::Relaxed);
                    retry += 1;
                }
                BackendError::ScriptExhausted { .. } => return Err(GatewayError::ScriptExhausted(err.to_string())),
                BackendError::Malformed(m) => return Err(GatewayError::MalformedResponse(m)),
                other => return Err(GatewayError::Backend(other.to_string())),
            }
        }
    }

    fn record_usage(&self, usage: Usage) {
        self.telemetry.prompt_tokens.fetch_add(usage.prompt_tokens, Ordering::Relaxed);
        self.telemetry.completion_tokens.fetch_add(usage.completion_tokens, Ordering::Relaxed);
        self.telemetry.reasoning_tokens.fetch_add(usage.reasoning_tokens, Ordering::Relaxed);
    }
}

fn validate_response(req: &ChatRequest, resp: &ChatResponse) -> Result<(), String> {
    let has_text = resp.text.as_deref().is_some_and(|t| !t.trim().is_empty());
    if !has_text && resp.tool_calls.is_empty() {
        return Err("response carries neither text nor tool calls".into());
    }
    for call in &resp.tool_calls {
        let schema = req
            .tools
            .iter()
            .find(|t| t.name == call.name)
            .ok_or_else(|| format!("call to undeclared tool `{}`", call.name))?;
        schema.check_arguments(&call.arguments)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    struct Flaky {
        failures_left: AtomicU32,
    }

    impl ChatBackend for Flaky {
        fn chat(&self, _req: &ChatRequest, _timeout: Duration) -> Result<ChatResponse, BackendError> {
            let left = self.failures_left.load(Ordering::SeqCst);
            if left > 0 {
                self.failures_left.store(left - 1, Ordering::SeqCst);
                return Err(BackendError::Transient("503".into()));
            }
            Ok(ChatResponse { text: Some("ok".into()), tool_calls: vec![], usage: Usage::default(), latency: Duration::ZERO })
        }
    }

    fn request(tools: Vec<ToolSchema>) -> ChatRequest {
        ChatRequest::for_role(
            &RunConfig::default(),
            RoleTag::Plan,
            CallScope::task("t1"),
            vec![Message::system("sys"), Message::user("hi")],
            tools,
        )
    }

    fn gateway(backend: Arc<dyn ChatBackend>) -> (Gateway, Arc<ManualClock>) {
        let clock = Arc::new(ManualClock::new());
        (Gateway::new(backend, &RunConfig::default(), clock.clone()), clock)
    }

    #[test]
    fn sixteen_failures_exhaust_fifteen_retries() {
        let (gw, _) = gateway(Arc::new(Flaky { failures_left: AtomicU32::new(16) }));
        let err = gw.complete(&request(vec![])).unwrap_err();
        assert_eq!(err, GatewayError::RetriesExhausted { attempts: 16, last: "transient backend failure: 503".into() });
        assert_eq!(gw.telemetry().retries, 15);
    }

    #[test]
    fn fifteen_failures_then_success() {
        let (gw, clock) = gateway(Arc::new(Flaky { failures_left: AtomicU32::new(15) }));
        let resp = gw.complete(&request(vec![])).unwrap();
        assert_eq!(resp.text(), "ok");
        assert_eq!(gw.telemetry().attempts, 16);
        // 16 throttled attempts at 0.5 rps need at least 30 s of virtual time
        assert!(clock.now() >= Duration::from_secs(30));
    }

    #[test]
    fn request_must_start_with_system() {
        let (gw, _) = gateway(Arc::new(Flaky { failures_left: AtomicU32::new(0) }));
        let mut req = request(vec![]);
        req.messages.remove(0);
        assert!(matches!(gw.complete(&req), Err(GatewayError::InvalidRequest(_))));
    }

    #[test]
    fn unknown_model_without_fallback() {
        let gw = Gateway::new(
            Arc::new(Flaky { failures_left: AtomicU32::new(0) }),
            &RunConfig::default(),
            Arc::new(ManualClock::new()),
        )
        .without_fallback();
        assert_eq!(gw.complete(&request(vec![])), Err(GatewayError::UnknownModel("default".into())));
    }

    #[test]
    fn tool_arguments_are_checked() {
        let tool = ToolSchema::new(
            "execute_sql",
            "run",
            vec![ParamSpec::new(
                "queries",
                ParamKind::Array(Box::new(ParamKind::Object(vec![
                    ParamSpec::new("sql_query", ParamKind::String, true, ""),
                    ParamSpec::new("exploration", ParamKind::Boolean, false, ""),
                ]))),
                true,
                "",
            )],
        );
        assert!(tool.check_arguments(&serde_json::json!({"queries": [{"sql_query": "SELECT 1"}]})).is_ok());
        assert!(tool.check_arguments(&serde_json::json!({"queries": [{"exploration": true}]})).is_err());
        assert!(tool.check_arguments(&serde_json::json!({"queries": "SELECT 1"})).is_err());
        let schema = tool.json_schema();
        assert_eq!(schema["required"], serde_json::json!(["queries"]));
    }

    #[test]
    fn duplicate_tool_names_rejected() {
        let t = ToolSchema::new("finish", "", vec![]);
        assert!(request(vec![t.clone(), t]).validate().is_err());
    }
}
