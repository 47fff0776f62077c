//! Test-case generator: links the schema once per task, then answers each
//! probe with batches of executed SQL candidates and nominates a final one.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use crate::agent::{extract_json_object, AgentContext, AgentError, CallKind};
use crate::executor::{execute_batch, ColumnInfo, TableInfo};
use crate::gateway::{CallScope, ChatResponse, Message, ParamKind, ParamSpec, ToolSchema};
use crate::par;
use crate::prompts::{Fragment, TemplateKind};
use crate::transcript::{EventKind, Trace};
use crate::types::{Probe, ProbeStatus, RoleTag, SqlCandidate};
use crate::verifier::verify;

pub const TOOL_EXECUTE: &str = "execute_sql";
pub const TOOL_INSUFFICIENT: &str = "not_enough_information";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaSource {
    Linked,
    FullFallback,
    Gold,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaTable {
    pub full_name: String,
    pub columns: Vec<ColumnInfo>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaContext {
    pub tables: Vec<SchemaTable>,
    /// database -> schema -> tables
    pub table_tree: BTreeMap<String, BTreeMap<String, Vec<String>>>,
    pub external_knowledge: Option<String>,
    pub source: SchemaSource,
}

impl SchemaContext {
    pub fn from_tables(
        db_id: &str,
        tables: &[TableInfo],
        description_limit: usize,
        external_knowledge: Option<String>,
        source: SchemaSource,
    ) -> Self {
        let mut tree: BTreeMap<String, BTreeMap<String, Vec<String>>> = BTreeMap::new();
        let tables: Vec<SchemaTable> = tables
            .iter()
            .map(|t| {
                tree.entry(db_id.to_string()).or_default().entry("main".into()).or_default().push(t.name.clone());
                SchemaTable {
                    full_name: format!("{db_id}.main.{}", t.name),
                    columns: t
                        .columns
                        .iter()
                        .map(|c| ColumnInfo {
                            name: c.name.clone(),
                            data_type: c.data_type.clone(),
                            description: c.description.as_ref().map(|d| d.chars().take(description_limit).collect()),
                        })
                        .collect(),
                }
            })
            .collect();
        SchemaContext { tables, table_tree: tree, external_knowledge, source }
    }

    pub fn table_info(&self) -> String {
        let mut out = String::new();
        for t in &self.tables {
            out.push_str(&format!("Table {}\n", t.full_name));
            for c in &t.columns {
                let ty = if c.data_type.is_empty() { "ANY" } else { c.data_type.as_str() };
                match &c.description {
                    Some(d) => out.push_str(&format!("  - {} ({ty}): {d}\n", c.name)),
                    None => out.push_str(&format!("  - {} ({ty})\n", c.name)),
                }
            }
        }
        out.trim_end().to_string()
    }

    pub fn table_names(&self) -> String {
        let mut out = String::new();
        for (db, schemas) in &self.table_tree {
            out.push_str(&format!("{db}\n"));
            for (schema, tables) in schemas {
                out.push_str(&format!("  {schema}\n"));
                for t in tables {
                    out.push_str(&format!("    {t}\n"));
                }
            }
        }
        out.trim_end().to_string()
    }

    pub fn short_names(&self) -> Vec<String> {
        self.tables.iter().map(|t| t.full_name.rsplit('.').next().unwrap_or(&t.full_name).to_string()).collect()
    }
}

fn select_tables(all: &[TableInfo], db_id: &str, names: &[String]) -> Vec<TableInfo> {
    let wanted: BTreeSet<String> = names.iter().map(|n| n.trim().to_ascii_lowercase()).collect();
    all.iter()
        .filter(|t| {
            let short = t.name.to_ascii_lowercase();
            let full = format!("{db_id}.main.{}", t.name).to_ascii_lowercase();
            wanted.contains(&short) || wanted.contains(&full)
        })
        .cloned()
        .collect()
}

/// Picks the tables for a task, leaning towards recall.
pub fn link_schema(ctx: &AgentContext<'_>, trace: &mut Trace) -> Result<SchemaContext, AgentError> {
    let db_id = ctx.db.db_id().to_string();
    let all = ctx.db.introspect().map_err(|e| crate::executor::ExecError::DbUnavailable {
        db_id: db_id.clone(),
        reason: e.to_string(),
    })?;
    let limit = ctx.cfg.column_description_limit;
    let knowledge = ctx.task.external_knowledge.clone();
    let build = |tables: &[TableInfo], source| SchemaContext::from_tables(&db_id, tables, limit, knowledge.clone(), source);

    if ctx.cfg.use_gold_schema {
        if let Some(gold) = ctx.task.gold_tables.as_deref().filter(|g| !g.is_empty()) {
            let chosen = select_tables(&all, &db_id, gold);
            if !chosen.is_empty() {
                let schema = build(&chosen, SchemaSource::Gold);
                log_schema(trace, &schema);
                return Ok(schema);
            }
        }
    }

    let listing: String = all
        .iter()
        .map(|t| {
            let cols: Vec<&str> = t.columns.iter().map(|c| c.name.as_str()).collect();
            format!("- {} ({})\n", t.name, cols.join(", "))
        })
        .collect();
    let system = ctx.prompts.render(
        TemplateKind::SchemaLink,
        &[
            ("tables", listing.trim_end().to_string()),
            ("external_knowledge", knowledge.clone().unwrap_or_else(|| "none".into())),
            ("question", ctx.task.question.clone()),
        ],
    )?;
    let messages = [Message::system(system), Message::user("Select the tables.")];
    let resp = ctx.call(trace, CallKind::SchemaLink, RoleTag::Generate, ctx.task_scope(), &messages, &[])?;
    let names = extract_json_object(resp.text()).map(|v| string_list(&v["tables"])).unwrap_or_default();
    let chosen = select_tables(&all, &db_id, &names);
    let schema = if chosen.is_empty() { build(&all, SchemaSource::FullFallback) } else { build(&chosen, SchemaSource::Linked) };
    log_schema(trace, &schema);
    Ok(schema)
}

fn log_schema(trace: &mut Trace, schema: &SchemaContext) {
    let names: Vec<&str> = schema.tables.iter().map(|t| t.full_name.as_str()).collect();
    trace.push(EventKind::SchemaLink, Some(RoleTag::Generate), None, json!({"source": schema.source, "tables": names}));
}

fn string_list(v: &Json) -> Vec<String> {
    v.as_array().map(|a| a.iter().filter_map(Json::as_str).map(String::from).collect()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorOutcome {
    pub probe: Probe,
    pub candidates: Vec<SqlCandidate>,
    #[serde(rename = "final")]
    pub final_sql: Option<String>,
    pub insufficient: Option<String>,
    pub iterations_used: usize,
    pub limit_hit: bool,
    pub error: Option<String>,
}

impl GeneratorOutcome {
    pub fn probe_id(&self) -> &str {
        &self.probe.probe_id
    }
}

pub fn generator_tools() -> Vec<ToolSchema> {
    let query = ParamKind::Object(vec![
        ParamSpec::new("description", ParamKind::String, true, "what this query tries"),
        ParamSpec::new("sql_query", ParamKind::String, true, "the SQL text"),
        ParamSpec::new("exploration", ParamKind::Boolean, false, "true for data-inspection queries"),
    ]);
    vec![
        ToolSchema::new(
            TOOL_EXECUTE,
            "Execute a batch of SQL queries and get one result line per query.",
            vec![ParamSpec::new("queries", ParamKind::Array(Box::new(query)), true, "queries to run")],
        ),
        ToolSchema::new(
            TOOL_INSUFFICIENT,
            "Declare that the database cannot answer the question.",
            vec![ParamSpec::new("reason", ParamKind::String, true, "why it cannot be answered")],
        ),
    ]
}

fn designation_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bfinal\b\s*(?:query|sql|answer)?\s*(?:is)?\s*[:=#]?\s*\[?(\d+)").unwrap())
}

/// 1-based candidate named in a closing reply; the earliest eligible one wins.
pub fn parse_designation(text: &str, candidates: &[SqlCandidate]) -> Option<usize> {
    designation_re()
        .captures_iter(text)
        .filter_map(|c| c[1].parse::<usize>().ok())
        .find(|n| *n >= 1 && candidates.get(n - 1).is_some_and(SqlCandidate::is_final_eligible))
}

fn batch_from(resp: &ChatResponse, probe_id: &str) -> Vec<SqlCandidate> {
    resp.calls_named(TOOL_EXECUTE)
        .flat_map(|c| c.arguments["queries"].as_array().cloned().unwrap_or_default())
        .filter_map(|q| {
            SqlCandidate::new(
                q["sql_query"].as_str().unwrap_or(""),
                q["description"].as_str().unwrap_or(""),
                q["exploration"].as_bool().unwrap_or(false),
                probe_id,
            )
            .ok()
        })
        .collect()
}

/// Keeps every exploration query and at most `cap` solution queries, in order.
fn apply_exec_cap(batch: Vec<SqlCandidate>, cap: usize) -> (Vec<SqlCandidate>, usize) {
    let mut kept = Vec::new();
    let mut solutions = 0;
    let mut dropped = 0;
    for c in batch {
        if c.exploration {
            kept.push(c);
        } else if solutions < cap {
            solutions += 1;
            kept.push(c);
        } else {
            dropped += 1;
        }
    }
    (kept, dropped)
}

/// Answers one probe.
pub fn generate(
    ctx: &AgentContext<'_>,
    probe: &Probe,
    schema: &SchemaContext,
    trace: &mut Trace,
) -> Result<GeneratorOutcome, AgentError> {
    let scope = CallScope::probe(&ctx.task.instance_id, &probe.probe_id);
    let system = ctx.prompts.render(
        TemplateKind::Generator,
        &[
            ("instructions", ctx.prompts.fragment(Fragment::GeneratorInstructions).to_string()),
            ("sql_guidelines", ctx.prompts.fragment(Fragment::SqlGuidelines).to_string()),
            ("dialect_rules", ctx.db.dialect_rules().to_string()),
            ("examples", ctx.prompts.fragment(Fragment::GeneratorExamples).to_string()),
            ("table_info", schema.table_info()),
            ("table_names", schema.table_names()),
            ("external_knowledge", schema.external_knowledge.clone().unwrap_or_else(|| "none".into())),
            ("question", probe.text.clone()),
        ],
    )?;
    let tools = generator_tools();
    let mut messages = vec![Message::system(system), Message::user(probe.text.clone())];
    let mut out = GeneratorOutcome {
        probe: probe.clone(),
        candidates: Vec::new(),
        final_sql: None,
        insufficient: None,
        iterations_used: 0,
        limit_hit: false,
        error: None,
    };
    let cap_limit = ctx.cfg.effective_exec_limit();
    let exec_workers = ctx.cfg.effective_probe_workers();
    let mut closing_text: Option<String> = None;

    while out.iterations_used < ctx.cfg.max_testcase_iters {
        let resp = ctx.call(trace, CallKind::Generator, RoleTag::Generate, scope.clone(), &messages, &tools)?;
        out.iterations_used += 1;
        messages.push(Message::assistant(resp.render()));

        if let Some(call) = resp.calls_named(TOOL_INSUFFICIENT).next() {
            let reason = call.arguments["reason"].as_str().unwrap_or("").trim().to_string();
            out.insufficient = Some(if reason.is_empty() { "no reason given".into() } else { reason });
            break;
        }
        if resp.calls_named(TOOL_EXECUTE).next().is_none() {
            closing_text = Some(resp.text().to_string());
            break;
        }

        let batch = batch_from(&resp, &probe.probe_id);
        let cap = cap_limit.cap(batch.len());
        let (batch, dropped) = apply_exec_cap(batch, cap);
        if batch.is_empty() {
            trace.push(
                EventKind::GeneratorTurn,
                Some(RoleTag::Generate),
                Some(&probe.probe_id),
                json!({"turn": out.iterations_used, "candidates": [], "dropped": dropped}),
            );
            messages.push(Message::tool("Error: execute_sql needs at least one query with a non-empty sql_query."));
            continue;
        }
        let first_index = out.candidates.len() + 1;
        let executed = execute_batch(ctx.db, batch, &ctx.policy(), exec_workers)?;
        trace.counters.sql_executions += executed.len() as u64;
        let mut lines = Vec::new();
        let mut logged = Vec::new();
        for (i, c) in executed.iter().enumerate() {
            let fb = c.feedback.as_ref().expect("execute_batch attaches feedback");
            lines.push(format!("[{}] {}", first_index + i, fb.render()));
            logged.push(json!({
                "sql": c.sql,
                "description": c.description,
                "exploration": c.exploration,
                "kind": fb.kind.to_string(),
                "message": fb.message,
                "row_count": fb.row_count,
            }));
        }
        if dropped > 0 {
            lines.push(format!("({dropped} solution queries over the per-turn limit were not executed)"));
        }
        trace.push(
            EventKind::GeneratorTurn,
            Some(RoleTag::Generate),
            Some(&probe.probe_id),
            json!({"turn": out.iterations_used, "first_index": first_index, "candidates": logged, "dropped": dropped}),
        );
        out.candidates.extend(executed);
        messages.push(Message::tool(lines.join("\n")));
    }

    match closing_text {
        Some(text) => {
            let idx = parse_designation(&text, &out.candidates)
                .or_else(|| out.candidates.iter().rposition(SqlCandidate::is_final_eligible).map(|i| i + 1));
            out.final_sql = idx.map(|i| out.candidates[i - 1].sql.clone());
        }
        None if out.insufficient.is_none() => {
            out.limit_hit = true;
            trace.counters.generator_recursion_hit = 1;
            trace.push(
                EventKind::LimitHit,
                Some(RoleTag::Generate),
                Some(&probe.probe_id),
                json!({"agent": "generator", "limit": ctx.cfg.max_testcase_iters}),
            );
        }
        None => {}
    }

    if ctx.cfg.verify_generator {
        if let Some(sql) = out.final_sql.clone() {
            let fb = out.candidates.iter().find(|c| c.sql == sql).and_then(|c| c.feedback.clone());
            if let Some(fb) = fb {
                match verify(ctx, trace, scope.clone(), &probe.text, &sql, &fb) {
                    Ok(v) if !v.correct => out.final_sql = None,
                    Ok(_) | Err(AgentError::MalformedVerdict(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
    }

    out.probe.status = if out.final_sql.is_some() { ProbeStatus::Generated } else { ProbeStatus::Failed };
    trace.push(
        EventKind::ProbeOutcome,
        Some(RoleTag::Generate),
        Some(&probe.probe_id),
        json!({
            "status": out.probe.status,
            "final": out.final_sql,
            "insufficient": out.insufficient,
            "iterations_used": out.iterations_used,
            "candidates": out.candidates.len(),
        }),
    );
    Ok(out)
}

/// Answers probes concurrently. Each probe gets its own trace, merged in order.
pub fn run_all(
    ctx: &AgentContext<'_>,
    probes: &[Probe],
    schema: &SchemaContext,
    trace: &mut Trace,
) -> Vec<GeneratorOutcome> {
    let base = trace.child();
    let results = par::map_bounded(probes.to_vec(), ctx.cfg.effective_probe_workers(), |probe| {
        let mut local = base.child();
        let outcome = match generate(ctx, &probe, schema, &mut local) {
            Ok(o) => o,
            Err(e) => {
                local.push(EventKind::Error, Some(RoleTag::Generate), Some(&probe.probe_id), json!({"message": e.to_string()}));
                GeneratorOutcome {
                    probe: probe.clone().with_status(ProbeStatus::Failed),
                    candidates: Vec::new(),
                    final_sql: None,
                    insufficient: None,
                    iterations_used: 0,
                    limit_hit: false,
                    error: Some(e.to_string()),
                }
            }
        };
        (outcome, local)
    });
    results
        .into_iter()
        .map(|(outcome, local)| {
            trace.absorb(local);
            outcome
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ExecutionFeedback, ExecutionOutcome};

    fn cand(exploration: bool, ok: bool) -> SqlCandidate {
        let mut c = SqlCandidate::new("SELECT 1", "", exploration, "p1").unwrap();
        c.feedback = Some(if ok {
            ExecutionFeedback::from_outcome(ExecutionOutcome::Completed { row_count: 1, preview: "x\n1".into() }, 0)
        } else {
            ExecutionFeedback::compilation_error("bad", 0)
        });
        c
    }

    #[test]
    fn designation_picks_earliest_eligible() {
        let cands = [cand(true, true), cand(false, false), cand(false, true), cand(false, true)];
        assert_eq!(parse_designation("final: 4", &cands), Some(4));
        assert_eq!(parse_designation("Final query 1 ... final: 2 ... final: 3", &cands), Some(3));
        assert_eq!(parse_designation("final: 9", &cands), None);
        assert_eq!(parse_designation("FINAL = [3]", &cands), Some(3));
    }

    #[test]
    fn exploration_does_not_count_against_cap() {
        let batch = vec![cand(true, true), cand(false, true), cand(true, true), cand(false, true), cand(false, true)];
        let (kept, dropped) = apply_exec_cap(batch, 1);
        assert_eq!(kept.len(), 3);
        assert_eq!(dropped, 2);
        assert_eq!(kept.iter().filter(|c| !c.exploration).count(), 1);
    }

    #[test]
    fn schema_rendering() {
        let tables = vec![TableInfo {
            name: "orders".into(),
            columns: vec![ColumnInfo {
                name: "status".into(),
                data_type: "TEXT".into(),
                description: Some("x".repeat(300)),
            }],
        }];
        let s = SchemaContext::from_tables("shop", &tables, 200, None, SchemaSource::Linked);
        assert_eq!(s.tables[0].full_name, "shop.main.orders");
        assert_eq!(s.tables[0].columns[0].description.as_ref().unwrap().len(), 200);
        assert_eq!(s.table_names(), "shop\n  main\n    orders");
        assert!(s.table_info().starts_with("Table shop.main.orders\n  - status (TEXT): xxx"));
    }

    #[test]
    fn select_tables_by_short_or_full_name() {
        let t = |n: &str| TableInfo { name: n.into(), columns: vec![] };
        let all = vec![t("a"), t("b"), t("c")];
        let got = select_tables(&all, "db", &["DB.MAIN.C".into(), "a".into(), "zzz".into()]);
        assert_eq!(got.iter().map(|t| t.name.as_str()).collect::<Vec<_>>(), ["a", "c"]);
    }
}
