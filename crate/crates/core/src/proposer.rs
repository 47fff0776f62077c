//! Final-query writer. Sees only the probe evidence, never the catalog.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agent::{extract_sql, AgentContext, AgentError, CallKind};
use crate::evidence::{EvidenceBundle, EvidenceEntry};
use crate::executor::execute;
use crate::gateway::Message;
use crate::prompts::{Fragment, TemplateKind};
use crate::transcript::{EventKind, Trace};
use crate::types::{ExecutionFeedback, RoleTag};
use crate::verifier::{verify, Verdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposerResult {
    pub sql: String,
    pub feedback: ExecutionFeedback,
    pub verdict: Option<Verdict>,
    pub iterations_used: usize,
    pub succeeded: bool,
    pub limit_hit: bool,
}

fn render_cluster(entries: &[EvidenceEntry]) -> String {
    if entries.is_empty() {
        return "(none)".into();
    }
    let mut out = String::new();
    for (probe, cand) in entries {
        out.push_str(&format!("- Probe [{}]: {}\n", probe.probe_id, probe.text));
        if !cand.description.is_empty() {
            out.push_str(&format!("  Approach: {}\n", cand.description));
        }
        out.push_str(&format!("  SQL: {}\n", cand.sql.replace('\n', "\n       ")));
        if let Some(fb) = &cand.feedback {
            out.push_str(&format!("  Result: {}\n", fb.render().replace('\n', "\n    ")));
        }
    }
    out.trim_end().to_string()
}

/// The proposer's system prompt for `bundle`.
pub fn render_prompt(ctx: &AgentContext<'_>, bundle: &EvidenceBundle) -> Result<String, AgentError> {
    Ok(ctx.prompts.render(
        TemplateKind::Proposer,
        &[
            ("sql_guidelines", ctx.prompts.fragment(Fragment::SqlGuidelines).to_string()),
            ("dialect_rules", ctx.db.dialect_rules().to_string()),
            ("question", ctx.task.question.clone()),
            ("paraphrase", ctx.task.paraphrase().to_string()),
            ("exploratory", render_cluster(&bundle.exploratory)),
            ("failures", render_cluster(&bundle.failures)),
            ("successes", render_cluster(&bundle.successes)),
            ("finals", render_cluster(&bundle.finals)),
        ],
    )?)
}

pub fn propose(ctx: &AgentContext<'_>, bundle: &EvidenceBundle, trace: &mut Trace) -> Result<ProposerResult, AgentError> {
    if bundle.is_empty() {
        return Err(AgentError::EmptyEvidence);
    }
    let mut messages = vec![Message::system(render_prompt(ctx, bundle)?), Message::user("Write the final SQL query.")];
    let limit = ctx.cfg.max_proposer_iters;
    let scope = ctx.task_scope();
    let mut best_success: Option<(String, ExecutionFeedback, Option<Verdict>)> = None;
    let mut last: Option<(String, ExecutionFeedback)> = None;
    let mut turn = 0;

    while turn < limit {
        turn += 1;
        let resp = ctx.call(trace, CallKind::Proposer, RoleTag::Propose, scope.clone(), &messages, &[])?;
        messages.push(Message::assistant(resp.render()));
        let Some(sql) = extract_sql(resp.text()) else {
            messages.push(Message::user("No SQL found. Reply with one query inside a ```sql code block."));
            continue;
        };
        let feedback = execute(ctx.db.as_ref(), &sql, &ctx.policy())?;
        trace.counters.sql_executions += 1;
        trace.push(
            EventKind::Proposal,
            Some(RoleTag::Propose),
            None,
            json!({"turn": turn, "sql": sql, "kind": feedback.kind.to_string(), "message": feedback.message}),
        );
        last = Some((sql.clone(), feedback.clone()));
        if !feedback.is_success() {
            messages.push(Message::user(format!("Execution result: {}\nFix the query and send it again.", feedback.render())));
            continue;
        }
        if !ctx.cfg.use_verifier {
            return Ok(finish(trace, sql, feedback, None, turn, true, false));
        }
        match verify(ctx, trace, scope.clone(), &ctx.task.question, &sql, &feedback) {
            Ok(v) if v.correct => return Ok(finish(trace, sql, feedback, Some(v), turn, true, false)),
            Ok(v) => {
                messages.push(Message::user(format!(
                    "The query runs, but a reviewer read it as: \"{}\". Problem: {}\nRevise the query and send it again.",
                    v.back_translated_query, v.explanation
                )));
                best_success = Some((sql, feedback, Some(v)));
            }
            // An unreadable verdict does not block an executable query.
            Err(AgentError::MalformedVerdict(_)) => return Ok(finish(trace, sql, feedback, None, turn, true, false)),
            Err(e) => return Err(e),
        }
    }

    trace.counters.proposer_recursion_hit = 1;
    trace.push(EventKind::LimitHit, Some(RoleTag::Propose), None, json!({"agent": "proposer", "limit": limit}));
    let (sql, feedback, verdict) = match (best_success, last) {
        (Some(b), _) => b,
        (None, Some((sql, fb))) => (sql, fb, None),
        (None, None) => return Err(AgentError::NoSqlProduced),
    };
    Ok(finish(trace, sql, feedback, verdict, turn, false, true))
}

fn finish(
    trace: &mut Trace,
    sql: String,
    feedback: ExecutionFeedback,
    verdict: Option<Verdict>,
    iterations_used: usize,
    succeeded: bool,
    limit_hit: bool,
) -> ProposerResult {
    trace.push(
        EventKind::ProposerResult,
        Some(RoleTag::Propose),
        None,
        json!({"sql": sql, "succeeded": succeeded, "iterations_used": iterations_used, "limit_hit": limit_hit}),
    );
    ProposerResult { sql, feedback, verdict, iterations_used, succeeded, limit_hit }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ExecutionOutcome, Probe, SqlCandidate};

    #[test]
    fn cluster_rendering() {
        assert_eq!(render_cluster(&[]), "(none)");
        let p = Probe::new("p1", "count orders", "t").unwrap();
        let mut c = SqlCandidate::new("SELECT count(*) FROM orders", "plain count", false, "p1").unwrap();
        c.feedback = Some(ExecutionFeedback::from_outcome(ExecutionOutcome::Completed { row_count: 1, preview: "n\n4".into() }, 0));
        let text = render_cluster(&[(p, c)]);
        assert!(text.starts_with("- Probe [p1]: count orders\n  Approach: plain count\n  SQL: SELECT count(*) FROM orders"));
        assert!(text.contains("Result: Success"));
    }
}
