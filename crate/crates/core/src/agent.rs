//! Plumbing shared by the planner, generator, proposer and verifier.

use serde_json::json;
use thiserror::Error;

use crate::config::RunConfig;
use crate::executor::{DbHandle, ExecError, TruncationPolicy};
use crate::gateway::{CallScope, ChatRequest, ChatResponse, Gateway, GatewayError, Message, ToolSchema};
use crate::prompts::{PromptError, PromptSet};
use crate::transcript::{digest, EventKind, Trace};
use crate::types::{RoleTag, Task};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("planner called no tool with probes")]
    NoProbes,
    #[error("{agent} reached its iteration limit of {limit}")]
    IterationLimit { agent: &'static str, limit: usize },
    #[error("verifier reply is not a valid verdict: {0}")]
    MalformedVerdict(String),
    #[error("verification requires a successfully executed query")]
    NotExecutable,
    #[error("proposer was given an empty evidence bundle")]
    EmptyEvidence,
    #[error("proposer never produced SQL")]
    NoSqlProduced,
}

/// Which agent step a model call belongs to, for counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallKind {
    Planner,
    SchemaLink,
    Generator,
    Proposer,
    Verifier,
    Judge,
}

impl CallKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CallKind::Planner => "planner",
            CallKind::SchemaLink => "schema_link",
            CallKind::Generator => "generator",
            CallKind::Proposer => "proposer",
            CallKind::Verifier => "verifier",
            CallKind::Judge => "judge",
        }
    }
}

/// Everything an agent needs for one task.
#[derive(Clone, Copy)]
pub struct AgentContext<'a> {
    pub cfg: &'a RunConfig,
    pub gateway: &'a Gateway,
    pub db: &'a DbHandle,
    pub prompts: &'a PromptSet,
    pub task: &'a Task,
}

impl<'a> AgentContext<'a> {
    pub fn policy(&self) -> TruncationPolicy {
        TruncationPolicy::from_config(self.cfg)
    }

    pub fn task_scope(&self) -> CallScope {
        CallScope::task(&self.task.instance_id)
    }

    /// Sends one request and records it in `trace`.
    pub fn call(
        &self,
        trace: &mut Trace,
        kind: CallKind,
        role: RoleTag,
        scope: CallScope,
        messages: &[Message],
        tools: &[ToolSchema],
    ) -> Result<ChatResponse, AgentError> {
        let req = ChatRequest::for_role(self.cfg, role, scope.clone(), messages.to_vec(), tools.to_vec());
        let prompt_digest = digest(serde_json::to_string(&req.messages).unwrap_or_default().as_bytes());
        let result = self.gateway.complete(&req);
        let c = &mut trace.counters;
        let slot = match kind {
            CallKind::Planner => Some(&mut c.planner_calls),
            CallKind::SchemaLink => Some(&mut c.schema_link_calls),
            CallKind::Generator => Some(&mut c.generator_turns),
            CallKind::Proposer => Some(&mut c.proposer_turns),
            CallKind::Verifier => Some(&mut c.verifier_calls),
            // judge calls score plans offline and stay out of the run totals
            CallKind::Judge => None,
        };
        if let Some(n) = slot {
            *n += 1;
            c.llm_calls += 1;
        }
        let last_input = messages.last().map(|m| m.content.clone()).unwrap_or_default();
        match &result {
            Ok(resp) => {
                c.output_tokens += resp.usage.completion_tokens;
                c.reasoning_tokens += resp.usage.reasoning_tokens;
                trace.push(
                    EventKind::LlmCall,
                    Some(role),
                    scope.probe.as_deref(),
                    json!({
                        "call": kind.as_str(),
                        "prompt_digest": prompt_digest,
                        "input": last_input,
                        "response": resp.render(),
                        "usage": resp.usage,
                    }),
                );
            }
            Err(e) => trace.push(
                EventKind::LlmCall,
                Some(role),
                scope.probe.as_deref(),
                json!({"call": kind.as_str(), "prompt_digest": prompt_digest, "input": last_input, "error": e.to_string()}),
            ),
        }
        Ok(result?)
    }
}

/// Pulls the first fenced code block (```sql or plain ```), else the whole text.
pub fn extract_sql(text: &str) -> Option<String> {
    let trimmed = text.trim();
    if let Some(start) = trimmed.find("```") {
        let after = &trimmed[start + 3..];
        let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
        let lang = after[..body_start].trim();
        if lang.is_empty() || lang.eq_ignore_ascii_case("sql") {
            let body = &after[body_start..];
            let end = body.find("```").unwrap_or(body.len());
            let sql = body[..end].trim();
            return (!sql.is_empty()).then(|| sql.to_string());
        }
    }
    (!trimmed.is_empty()).then(|| trimmed.to_string())
}

/// Pulls the first JSON object out of free text (bare or fenced).
pub fn extract_json_object(text: &str) -> Option<serde_json::Value> {
    let trimmed = text.trim();
    if let Ok(v @ serde_json::Value::Object(_)) = serde_json::from_str(trimmed) {
        return Some(v);
    }
    let start = trimmed.find('{')?;
    let end = trimmed.rfind('}')?;
    if end <= start {
        return None;
    }
    match serde_json::from_str(&trimmed[start..=end]) {
        Ok(v @ serde_json::Value::Object(_)) => Some(v),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sql_from_fence_or_plain() {
        assert_eq!(extract_sql("Here:\n```sql\nSELECT 1\n```\nbye").as_deref(), Some("SELECT 1"));
        assert_eq!(extract_sql("```\nSELECT 2\n```").as_deref(), Some("SELECT 2"));
        assert_eq!(extract_sql("  SELECT 3 ").as_deref(), Some("SELECT 3"));
        assert_eq!(extract_sql("```sql\n```"), None);
        assert_eq!(extract_sql(""), None);
    }

    #[test]
    fn json_in_prose() {
        let v = extract_json_object("Sure! ```json\n{\"a\": 1}\n```").unwrap();
        assert_eq!(v["a"], 1);
        assert!(extract_json_object("no json here").is_none());
    }
}
