//! Semantic check of executable SQL: the model restates what the query
//! asks, then judges whether that matches the user's question.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use crate::agent::{extract_json_object, AgentContext, AgentError, CallKind};
use crate::gateway::{CallScope, Message};
use crate::prompts::{Fragment, TemplateKind};
use crate::transcript::{EventKind, Trace};
use crate::types::{ExecutionFeedback, FeedbackKind, RoleTag};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub correct: bool,
    pub explanation: String,
    pub back_translated_query: String,
}

/// Accepts any field order; all three fields must be present and non-empty.
pub fn parse_verdict(text: &str) -> Result<Verdict, String> {
    let obj = extract_json_object(text).ok_or_else(|| "no JSON object found".to_string())?;
    let correct = match obj.get("correct") {
        Some(Json::Bool(b)) => *b,
        Some(Json::String(s)) if s.eq_ignore_ascii_case("true") => true,
        Some(Json::String(s)) if s.eq_ignore_ascii_case("false") => false,
        Some(_) => return Err("`correct` must be a boolean".into()),
        None => return Err("missing `correct`".into()),
    };
    let field = |name: &str| -> Result<String, String> {
        match obj.get(name) {
            Some(Json::String(s)) if !s.trim().is_empty() => Ok(s.trim().to_string()),
            Some(Json::String(_)) => Err(format!("`{name}` is empty")),
            Some(_) => Err(format!("`{name}` must be a string")),
            None => Err(format!("missing `{name}`")),
        }
    };
    Ok(Verdict { correct, explanation: field("explanation")?, back_translated_query: field("back_translated_query")? })
}

const REPARSE_REQUEST: &str = "Your reply could not be read as a verdict. Send only the JSON object with the keys \
back_translated_query (string), correct (true or false) and explanation (string).";

/// One verifier exchange, with a single corrective retry on a malformed reply.
pub fn verify(
    ctx: &AgentContext<'_>,
    trace: &mut Trace,
    scope: CallScope,
    question: &str,
    sql: &str,
    feedback: &ExecutionFeedback,
) -> Result<Verdict, AgentError> {
    if feedback.kind != FeedbackKind::Success {
        return Err(AgentError::NotExecutable);
    }
    let system = ctx.prompts.render(
        TemplateKind::Verifier,
        &[
            ("question", question.to_string()),
            ("sql", sql.to_string()),
            ("executed_result", feedback.result_preview.clone().unwrap_or_default()),
            ("guidelines", ctx.prompts.fragment(Fragment::VerifierGuidelines).to_string()),
        ],
    )?;
    let mut messages = vec![Message::system(system), Message::user("Give your verdict.")];
    trace.counters.semantic_verifications += 1;
    let mut last_problem = String::new();
    for attempt in 0..2 {
        let resp = ctx.call(trace, CallKind::Verifier, RoleTag::Verify, scope.clone(), &messages, &[])?;
        match parse_verdict(resp.text()) {
            Ok(v) => {
                trace.push(
                    EventKind::Verdict,
                    Some(RoleTag::Verify),
                    scope.probe.as_deref(),
                    json!({"sql": sql, "correct": v.correct, "explanation": v.explanation, "back_translated_query": v.back_translated_query}),
                );
                return Ok(v);
            }
            Err(problem) if attempt == 0 => {
                messages.push(Message::assistant(resp.render()));
                messages.push(Message::user(format!("{REPARSE_REQUEST} Problem: {problem}.")));
                last_problem = problem;
            }
            Err(problem) => last_problem = problem,
        }
    }
    trace.push(
        EventKind::Verdict,
        Some(RoleTag::Verify),
        scope.probe.as_deref(),
        json!({"sql": sql, "malformed": last_problem}),
    );
    Err(AgentError::MalformedVerdict(last_problem))
}
