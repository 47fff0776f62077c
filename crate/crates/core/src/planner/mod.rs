//! Control agent: emits the probe suite in one call, then decides between
//! more probes, a proposal, and finishing.

pub mod metrics;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use crate::agent::{AgentContext, AgentError, CallKind};
use crate::evidence::EvidenceBundle;
use crate::executor::execute;
use crate::gateway::{ChatResponse, Message, ParamKind, ParamSpec, ToolSchema};
use crate::prompts::{Fragment, TemplateKind};
use crate::transcript::{EventKind, Trace};
use crate::types::{ExecutionFeedback, Probe, RoleTag, Task};
use crate::verifier::{verify, Verdict};

pub use metrics::{plan_metrics, HeuristicJudge, ModelJudge, PlanMetrics, ProbeJudge};

pub const TOOL_GENERATE: &str = "generate_testcase";
pub const TOOL_PROPOSE: &str = "propose_final_sql";
pub const TOOL_FINISH: &str = "finish";

/// One final-query attempt with its checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub sql: String,
    pub feedback: ExecutionFeedback,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    pub succeeded: bool,
}

#[derive(Debug, Clone)]
pub struct PlannerState {
    pub task: Task,
    pub probes: Vec<Probe>,
    pub rounds: usize,
    /// Latest proposal, whatever its outcome.
    pub pending_final: Option<Proposal>,
    /// Most recent proposal that executed with Success.
    pub last_success: Option<Proposal>,
    pub iterations_used: usize,
    messages: Vec<Message>,
    reported: BTreeSet<String>,
    proposal_reported: bool,
    notes: Vec<String>,
}

impl PlannerState {
    pub fn new(task: Task) -> Self {
        PlannerState {
            task,
            probes: Vec::new(),
            rounds: 0,
            pending_final: None,
            last_success: None,
            iterations_used: 0,
            messages: Vec::new(),
            reported: BTreeSet::new(),
            proposal_reported: true,
            notes: Vec::new(),
        }
    }

    /// Extra line for the next planner update, e.g. why a proposal was skipped.
    pub fn add_note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    pub fn record_proposal(&mut self, p: Proposal) {
        if p.feedback.is_success() {
            self.last_success = Some(p.clone());
        }
        self.pending_final = Some(p);
        self.proposal_reported = false;
    }

    /// Marks probes as generated or failed after a generation round.
    pub fn update_probes(&mut self, outcomes: &[Probe]) {
        for o in outcomes {
            if let Some(p) = self.probes.iter_mut().find(|p| p.probe_id == o.probe_id) {
                p.status = o.status;
            }
        }
    }

    fn new_probes(&mut self, texts: &[String], ctx: &AgentContext<'_>) -> Vec<Probe> {
        let cap = ctx.cfg.plan_branch_limit.cap(texts.len());
        let mut out = Vec::new();
        for text in texts.iter().take(cap) {
            let id = format!("p{}", self.probes.len() + 1);
            if let Ok(p) = Probe::new(id, text.as_str(), &self.task.instance_id) {
                self.probes.push(p.clone());
                out.push(p);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    MoreProbes(Vec<Probe>),
    Propose,
    Finish(String),
}

impl Decision {
    pub fn name(&self) -> &'static str {
        match self {
            Decision::MoreProbes(_) => "more_probes",
            Decision::Propose => "propose",
            Decision::Finish(_) => "finish",
        }
    }
}

pub fn planner_tools(use_proposer: bool) -> Vec<ToolSchema> {
    let mut tools = vec![ToolSchema::new(
        TOOL_GENERATE,
        "Run a list of self-contained probe questions in parallel. Each probe is answered with executed SQL.",
        vec![ParamSpec::new("probes", ParamKind::Array(Box::new(ParamKind::String)), true, "probe questions")],
    )];
    if use_proposer {
        tools.push(ToolSchema::new(
            TOOL_PROPOSE,
            "Ask the proposer to write the final SQL from the probe evidence gathered so far.",
            vec![],
        ));
        tools.push(ToolSchema::new(
            TOOL_FINISH,
            "End the task with the latest proposed query. Only valid after a proposal executed successfully.",
            vec![ParamSpec::new("sql", ParamKind::String, false, "ignored; the latest proposal is used")],
        ));
    } else {
        tools.push(ToolSchema::new(
            TOOL_FINISH,
            "End the task with this final SQL. It is executed and checked before the task ends.",
            vec![ParamSpec::new("sql", ParamKind::String, true, "the final SQL query")],
        ));
    }
    tools
}

fn tool_listing(tools: &[ToolSchema]) -> String {
    tools.iter().map(|t| format!("- {}: {}", t.name, t.description)).collect::<Vec<_>>().join("\n")
}

fn string_list(v: &Json) -> Vec<String> {
    v.as_array()
        .map(|a| a.iter().filter_map(Json::as_str).map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
        .unwrap_or_default()
}

fn generate_args(resp: &ChatResponse) -> Option<Vec<String>> {
    let calls: Vec<_> = resp.calls_named(TOOL_GENERATE).collect();
    if calls.is_empty() {
        return None;
    }
    Some(calls.iter().flat_map(|c| string_list(&c.arguments["probes"])).collect())
}

/// Single planning call that emits the first probe round.
pub fn plan(ctx: &AgentContext<'_>, state: &mut PlannerState, trace: &mut Trace) -> Result<Vec<Probe>, AgentError> {
    let tools = planner_tools(ctx.cfg.use_proposer);
    let system = ctx.prompts.render(
        TemplateKind::Planner,
        &[
            ("tools", tool_listing(&tools)),
            ("guidelines", ctx.prompts.fragment(Fragment::PlannerGuidelines).to_string()),
            ("failure_examples", ctx.prompts.fragment(Fragment::PlannerFailureExamples).to_string()),
            ("correct_examples", ctx.prompts.fragment(Fragment::PlannerCorrectExamples).to_string()),
            ("question", state.task.question.clone()),
            ("paraphrase", state.task.paraphrase().to_string()),
        ],
    )?;
    state.messages = vec![Message::system(system), Message::user("Plan the first round of probes.")];
    let resp = ctx.call(trace, CallKind::Planner, RoleTag::Plan, ctx.task_scope(), &state.messages, &tools)?;
    state.iterations_used += 1;
    state.messages.push(Message::assistant(resp.render()));
    let texts = generate_args(&resp).unwrap_or_default();
    if texts.is_empty() {
        trace.push(EventKind::Plan, Some(RoleTag::Plan), None, json!({"round": 1, "probes": []}));
        return Err(AgentError::NoProbes);
    }
    Ok(start_round(ctx, state, trace, &texts))
}

fn start_round(ctx: &AgentContext<'_>, state: &mut PlannerState, trace: &mut Trace, texts: &[String]) -> Vec<Probe> {
    let probes = state.new_probes(texts, ctx);
    state.rounds += 1;
    trace.counters.parallel_plans = trace.counters.parallel_plans.max(probes.len() as u64);
    trace.counters.probes_generated += probes.len() as u64;
    trace.push(
        EventKind::Plan,
        Some(RoleTag::Plan),
        None,
        json!({"round": state.rounds, "requested": texts.len(), "probes": probes}),
    );
    probes
}

fn render_update(state: &mut PlannerState, evidence: &EvidenceBundle) -> String {
    let mut out = String::new();
    let fresh: Vec<Probe> = state.probes.iter().filter(|p| !state.reported.contains(&p.probe_id)).cloned().collect();
    if !fresh.is_empty() {
        out.push_str("Probe results:\n");
    }
    for p in &fresh {
        let of = |cluster: &[(Probe, crate::types::SqlCandidate)]| cluster.iter().filter(|(q, _)| q.probe_id == p.probe_id).count();
        let fin = evidence.finals.iter().find(|(q, _)| q.probe_id == p.probe_id);
        out.push_str(&format!("[{}] {}\n", p.probe_id, p.text));
        match fin {
            Some((_, c)) => {
                out.push_str(&format!("  answered with: {}\n", c.sql));
                if let Some(fb) = &c.feedback {
                    out.push_str(&format!("  {}\n", fb.render().replace('\n', "\n  ")));
                }
            }
            None => out.push_str("  no final answer\n"),
        }
        out.push_str(&format!(
            "  other candidates: {} successful, {} failed, {} exploration\n",
            of(&evidence.successes),
            of(&evidence.failures),
            of(&evidence.exploratory)
        ));
        state.reported.insert(p.probe_id.clone());
    }
    if !state.proposal_reported {
        if let Some(prop) = &state.pending_final {
            out.push_str(&format!("Latest proposal:\n{}\n  {}\n", prop.sql, prop.feedback.render().replace('\n', "\n  ")));
            if let Some(v) = &prop.verdict {
                out.push_str(&format!("  verifier: correct={}, {}\n", v.correct, v.explanation));
            }
            out.push_str(if prop.succeeded { "  status: accepted\n" } else { "  status: rejected\n" });
        }
        state.proposal_reported = true;
    }
    for note in state.notes.drain(..) {
        out.push_str(&format!("Note: {note}\n"));
    }
    if out.is_empty() {
        out.push_str("No new results.\n");
    }
    out.push_str("Choose the next tool.");
    out
}

/// One decision. Invalid replies are fed back and retried within the budget.
pub fn step(
    ctx: &AgentContext<'_>,
    state: &mut PlannerState,
    evidence: &EvidenceBundle,
    trace: &mut Trace,
) -> Result<Decision, AgentError> {
    let limit = ctx.cfg.max_planner_iters;
    let tools = planner_tools(ctx.cfg.use_proposer);
    let update = render_update(state, evidence);
    state.messages.push(Message::tool(update));
    loop {
        if state.iterations_used >= limit {
            trace.counters.planner_recursion_hit = 1;
            trace.push(EventKind::LimitHit, Some(RoleTag::Plan), None, json!({"agent": "planner", "limit": limit}));
            return Err(AgentError::IterationLimit { agent: "planner", limit });
        }
        let resp = ctx.call(trace, CallKind::Planner, RoleTag::Plan, ctx.task_scope(), &state.messages, &tools)?;
        state.iterations_used += 1;
        state.messages.push(Message::assistant(resp.render()));
        match interpret(ctx, state, &resp, trace)? {
            Ok(decision) => {
                let mut payload = json!({"decision": decision.name(), "iteration": state.iterations_used});
                if let Decision::Finish(sql) = &decision {
                    payload["sql"] = json!(sql);
                }
                trace.push(EventKind::PlannerDecision, Some(RoleTag::Plan), None, payload);
                return Ok(decision);
            }
            Err(problem) => {
                trace.push(
                    EventKind::PlannerDecision,
                    Some(RoleTag::Plan),
                    None,
                    json!({"decision": "invalid", "iteration": state.iterations_used, "note": problem}),
                );
                state.messages.push(Message::tool(format!("Error: {problem} Choose the next tool.")));
            }
        }
    }
}

fn interpret(
    ctx: &AgentContext<'_>,
    state: &mut PlannerState,
    resp: &ChatResponse,
    trace: &mut Trace,
) -> Result<Result<Decision, String>, AgentError> {
    let Some(call) = resp.tool_calls.first() else {
        return Ok(Err("no tool was called.".into()));
    };
    match call.name.as_str() {
        TOOL_GENERATE => {
            let texts = generate_args(resp).unwrap_or_default();
            if texts.is_empty() {
                return Ok(Err("generate_testcase needs at least one probe.".into()));
            }
            Ok(Ok(Decision::MoreProbes(start_round(ctx, state, trace, &texts))))
        }
        TOOL_PROPOSE => Ok(Ok(Decision::Propose)),
        TOOL_FINISH if ctx.cfg.use_proposer => match &state.last_success {
            Some(p) => Ok(Ok(Decision::Finish(p.sql.clone()))),
            None => Ok(Err("finish is only allowed after a proposed query executed successfully.".into())),
        },
        TOOL_FINISH => {
            let Some(sql) = call.arguments.get("sql").and_then(Json::as_str).map(str::trim).filter(|s| !s.is_empty())
            else {
                return Ok(Err("finish needs the final SQL.".into()));
            };
            let proposal = check_direct_sql(ctx, trace, sql)?;
            let accepted = proposal.succeeded;
            let note = proposal_note(&proposal);
            state.record_proposal(proposal);
            state.proposal_reported = true;
            if accepted {
                Ok(Ok(Decision::Finish(sql.to_string())))
            } else {
                Ok(Err(format!("the final SQL was not accepted. {note}")))
            }
        }
        other => Ok(Err(format!("unknown tool `{other}`."))),
    }
}

fn proposal_note(p: &Proposal) -> String {
    match &p.verdict {
        Some(v) if !v.correct => format!("Verifier: {}", v.explanation),
        _ => p.feedback.render(),
    }
}

/// Executes (and optionally verifies) SQL the planner submits without a proposer.
fn check_direct_sql(ctx: &AgentContext<'_>, trace: &mut Trace, sql: &str) -> Result<Proposal, AgentError> {
    let feedback = execute(ctx.db.as_ref(), sql, &ctx.policy())?;
    trace.counters.sql_executions += 1;
    trace.push(
        EventKind::Proposal,
        Some(RoleTag::Plan),
        None,
        json!({"turn": 1, "sql": sql, "kind": feedback.kind.to_string(), "message": feedback.message}),
    );
    let mut verdict = None;
    if feedback.is_success() && ctx.cfg.use_verifier {
        match verify(ctx, trace, ctx.task_scope(), &ctx.task.question, sql, &feedback) {
            Ok(v) => verdict = Some(v),
            Err(AgentError::MalformedVerdict(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let succeeded = feedback.is_success() && verdict.as_ref().is_none_or(|v| v.correct);
    Ok(Proposal { sql: sql.to_string(), feedback, verdict, succeeded })
}

/// SQL to emit when the planner runs out of budget, with where it came from.
pub fn fallback(state: &PlannerState, evidence: &EvidenceBundle) -> Option<(&'static str, String)> {
    if let Some(p) = &state.last_success {
        return Some(("last_successful_proposal", p.sql.clone()));
    }
    evidence.finals.first().map(|(_, c)| ("first_final_candidate", c.sql.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tools_depend_on_mode() {
        let with = planner_tools(true);
        assert_eq!(with.iter().map(|t| t.name.as_str()).collect::<Vec<_>>(), [TOOL_GENERATE, TOOL_PROPOSE, TOOL_FINISH]);
        let without = planner_tools(false);
        assert_eq!(without.len(), 2);
        assert!(without[1].parameters[0].required);
    }

    #[test]
    fn fallback_prefers_successful_proposal() {
        let task = Task::new("t", "q", "db").unwrap();
        let mut st = PlannerState::new(task);
        assert_eq!(fallback(&st, &EvidenceBundle::default()), None);
        let ok = ExecutionFeedback::from_outcome(
            crate::types::ExecutionOutcome::Completed { row_count: 1, preview: "a\n1".into() },
            0,
        );
        st.record_proposal(Proposal { sql: "SELECT 1".into(), feedback: ok, verdict: None, succeeded: false });
        st.record_proposal(Proposal {
            sql: "SELEC".into(),
            feedback: ExecutionFeedback::compilation_error("syntax", 0),
            verdict: None,
            succeeded: false,
        });
        assert_eq!(fallback(&st, &EvidenceBundle::default()), Some(("last_successful_proposal", "SELECT 1".into())));
    }
}
