//! OpenAI-compatible chat-completions client.

use std::time::{Duration, Instant};

use serde_json::{json, Value as Json};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, Speaker, ToolCall, Usage};

pub const API_KEY_ENV: &str = "SQLPROBE_API_KEY";
const FALLBACK_KEY_ENV: &str = "OPENAI_API_KEY";

#[derive(Debug, Clone)]
pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    /// `base_url` is either the full `/chat/completions` URL or its prefix.
    pub fn new(base_url: &str) -> Result<Self, BackendError> {
        let trimmed = base_url.trim_end_matches('/');
        let endpoint = if trimmed.ends_with("/chat/completions") {
            trimmed.to_string()
        } else {
            format!("{trimmed}/chat/completions")
        };
        let api_key = std::env::var(API_KEY_ENV).or_else(|_| std::env::var(FALLBACK_KEY_ENV)).ok();
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| BackendError::Fatal(format!("cannot build http client: {e}")))?;
        Ok(HttpBackend { endpoint, api_key, client })
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

pub(crate) fn request_body(req: &ChatRequest) -> Json {
    let messages: Vec<Json> = req
        .messages
        .iter()
        .map(|m| match m.speaker {
            Speaker::System => json!({"role": "system", "content": m.content}),
            Speaker::User => json!({"role": "user", "content": m.content}),
            Speaker::Assistant => json!({"role": "assistant", "content": m.content}),
            // Tool output is replayed as plain user text so no call ids need tracking.
            Speaker::Tool => json!({"role": "user", "content": format!("[tool result]\n{}", m.content)}),
        })
        .collect();
    let mut body = json!({
        "model": req.model_id,
        "messages": messages,
        "temperature": req.temperature,
    });
    if !req.tools.is_empty() {
        let tools: Vec<Json> = req
            .tools
            .iter()
            .map(|t| {
                json!({"type": "function", "function": {
                    "name": t.name,
                    "description": t.description,
                    "parameters": t.json_schema(),
                }})
            })
            .collect();
        body["tools"] = Json::Array(tools);
    }
    body
}

pub(crate) fn parse_response(body: &Json, latency: Duration) -> Result<ChatResponse, BackendError> {
    let message = body
        .pointer("/choices/0/message")
        .ok_or_else(|| BackendError::Malformed("no choices[0].message".into()))?;
    let text = message.get("content").and_then(Json::as_str).map(str::to_string);
    let mut tool_calls = Vec::new();
    if let Some(Json::Array(calls)) = message.get("tool_calls") {
        for call in calls {
            let name = call
                .pointer("/function/name")
                .and_then(Json::as_str)
                .ok_or_else(|| BackendError::Malformed("tool call without a name".into()))?;
            let arguments = match call.pointer("/function/arguments") {
                Some(Json::String(s)) if s.trim().is_empty() => json!({}),
                Some(Json::String(s)) => serde_json::from_str(s)
                    .map_err(|e| BackendError::Malformed(format!("arguments of `{name}` are not JSON: {e}")))?,
                Some(v) => v.clone(),
                None => json!({}),
            };
            tool_calls.push(ToolCall { name: name.to_string(), arguments });
        }
    }
    let counter = |ptr: &str| body.pointer(ptr).and_then(Json::as_u64).unwrap_or(0);
    let usage = Usage {
        prompt_tokens: counter("/usage/prompt_tokens"),
        completion_tokens: counter("/usage/completion_tokens"),
        reasoning_tokens: counter("/usage/completion_tokens_details/reasoning_tokens"),
    };
    Ok(ChatResponse { text, tool_calls, usage, latency })
}

impl ChatBackend for HttpBackend {
    fn chat(&self, req: &ChatRequest, timeout: Duration) -> Result<ChatResponse, BackendError> {
        let started = Instant::now();
        let mut builder = self.client.post(&self.endpoint).timeout(timeout).json(&request_body(req));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout(timeout)
            } else {
                BackendError::Transient(e.to_string())
            }
        })?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transient(format!("http status {status}")));
        }
        if !status.is_success() {
            let detail = resp.text().unwrap_or_default();
            return Err(BackendError::Fatal(format!("http status {status}: {}", detail.trim())));
        }
        let body: Json = resp.json().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout(timeout)
            } else {
                BackendError::Malformed(e.to_string())
            }
        })?;
        parse_response(&body, started.elapsed())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::gateway::{CallScope, Message, ParamKind, ParamSpec, ToolSchema};
    use crate::types::RoleTag;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves the given (status, body) pairs, one per connection.
    fn serve(replies: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                seen.push(String::from_utf8(buf).unwrap());
                let mut stream = reader.into_inner();
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            seen
        });
        (url, handle)
    }

    fn request() -> ChatRequest {
        let tool = ToolSchema::new("finish", "end", vec![ParamSpec::new("sql", ParamKind::String, false, "")]);
        ChatRequest::for_role(
            &RunConfig::default(),
            RoleTag::Plan,
            CallScope::task("t"),
            vec![Message::system("s"), Message::tool("rows")],
            vec![tool],
        )
    }

    #[test]
    fn round_trip_against_local_server() {
        let body = r#"{"choices":[{"message":{"content":null,"tool_calls":[{"id":"c1","type":"function","function":{"name":"finish","arguments":"{\"sql\":\"SELECT 1\"}"}}]}}],"usage":{"prompt_tokens":12,"completion_tokens":7,"completion_tokens_details":{"reasoning_tokens":3}}}"#;
        let (url, handle) = serve(vec![(200, body.to_string())]);
        let backend = HttpBackend::new(&url).unwrap().with_api_key(Some("k".into()));
        let resp = backend.chat(&request(), Duration::from_secs(5)).unwrap();
        assert_eq!(resp.tool_calls[0].arguments, json!({"sql": "SELECT 1"}));
        assert_eq!(resp.usage, Usage { prompt_tokens: 12, completion_tokens: 7, reasoning_tokens: 3 });
        let sent: Json = serde_json::from_str(&handle.join().unwrap()[0]).unwrap();
        assert_eq!(sent["messages"][1]["role"], "user");
        assert_eq!(sent["tools"][0]["function"]["name"], "finish");
    }

    #[test]
    fn status_codes_map_to_error_kinds() {
        let (url, handle) = serve(vec![(429, "{}".into()), (400, "{\"error\":\"bad\"}".into())]);
        let backend = HttpBackend::new(&url).unwrap();
        assert!(matches!(backend.chat(&request(), Duration::from_secs(5)), Err(BackendError::Transient(_))));
        assert!(matches!(backend.chat(&request(), Duration::from_secs(5)), Err(BackendError::Fatal(_))));
        handle.join().unwrap();
    }

    #[test]
    fn missing_choices_is_malformed() {
        assert!(matches!(parse_response(&json!({}), Duration::ZERO), Err(BackendError::Malformed(_))));
    }
}
