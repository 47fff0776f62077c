mod common;

use std::io::BufReader;
use std::sync::Arc;

use serde_json::json;

use sqlprobe_core::executor::DbCatalog;
use sqlprobe_core::gateway::{load_script, ScriptRecord, ScriptedBackend, SystemClock};
use sqlprobe_core::scheduler::{Engine, TaskRun};
use sqlprobe_core::transcript::{read_transcript, render_report, EventKind, TranscriptError};
use sqlprobe_core::types::{RoleTag, Task};

use common::*;

fn run_of<'a>(runs: &'a [TaskRun], id: &str) -> &'a TaskRun {
    runs.iter().find(|r| r.record.instance_id == id).unwrap()
}

fn payload(run: &TaskRun, kind: EventKind) -> Vec<&serde_json::Value> {
    run.events.iter().filter(|e| e.event == kind).map(|e| &e.payload).collect()
}

#[test]
fn toy_dataset_consumes_the_whole_script() {
    let cfg = toy_config();
    let backend = Arc::new(load_script(&toy_dir().join("script.jsonl")).unwrap());
    let engine = Engine::new(cfg.clone(), backend.clone(), DbCatalog::new(toy_dir(), &cfg), Arc::new(SystemClock::new()));
    let runs = engine.run_dataset(&toy_tasks());
    assert_eq!(runs.len(), 12);
    assert!(runs.iter().all(|r| r.record.succeeded), "{:?}", runs.iter().map(|r| &r.record).collect::<Vec<_>>());
    assert_eq!(backend.remaining(), 0);
}

#[test]
fn outputs_and_counters() {
    let dir = tempfile::tempdir().unwrap();
    let (summary, runs) = run_toy(toy_config(), dir.path());
    assert_eq!((summary.tasks, summary.succeeded, summary.failed), (12, 12, 0));
    for run in &runs {
        let c = &run.record.counters;
        let parts = c["planner_calls"] + c["generator_turns"] + c["proposer_turns"] + c["verifier_calls"] + c["schema_link_calls"];
        assert_eq!(c["llm_calls"], parts, "{}", run.record.instance_id);
        let llm_events = payload(run, EventKind::LlmCall).len() as u64;
        assert_eq!(c["llm_calls"], llm_events);
        let id = &run.record.instance_id;
        let sql = std::fs::read_to_string(dir.path().join(format!("predictions/{id}.sql"))).unwrap();
        assert_eq!(sql.trim_end(), run.record.final_sql.as_deref().unwrap());
    }
    let records = std::fs::read_to_string(dir.path().join("reports/records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 12);
}

#[test]
fn unknown_linked_table_falls_back_to_full_schema() {
    let (_, runs) = run_toy(toy_config(), tempfile::tempdir().unwrap().path());
    let link = payload(run_of(&runs, "shop_003"), EventKind::SchemaLink)[0];
    assert_eq!(link["source"], "full_fallback");
    assert_eq!(link["tables"].as_array().unwrap().len(), 3);
    assert_eq!(payload(run_of(&runs, "weather_003"), EventKind::SchemaLink)[0]["source"], "linked");
}

#[test]
fn probe_without_answer_is_reported_insufficient() {
    let (_, runs) = run_toy(toy_config(), tempfile::tempdir().unwrap().path());
    let outcomes = payload(run_of(&runs, "weather_003"), EventKind::ProbeOutcome);
    let failed: Vec<_> = outcomes.iter().filter(|p| p["status"] == "failed").collect();
    assert_eq!(failed.len(), 1);
    assert!(failed[0]["insufficient"].as_str().unwrap().contains("no equipment"));
    assert!(failed[0]["final"].is_null());
}

#[test]
fn rejected_verdict_leads_to_a_second_proposal() {
    let (_, runs) = run_toy(toy_config(), tempfile::tempdir().unwrap().path());
    let run = run_of(&runs, "school_001");
    let verdicts = payload(run, EventKind::Verdict);
    assert_eq!(verdicts.len(), 2);
    assert_eq!(run.record.counters["semantic_verifications"], 2);
}

#[test]
fn transcripts_replay_into_reports() {
    let dir = tempfile::tempdir().unwrap();
    run_toy(toy_config(), dir.path());
    for task in toy_tasks() {
        let path = dir.path().join(format!("transcripts/{}.jsonl", task.instance_id));
        let lines = read_transcript(BufReader::new(std::fs::File::open(&path).unwrap())).unwrap();
        let report = render_report(&lines);
        assert!(report.contains(&task.instance_id), "{report}");

        let text = std::fs::read_to_string(&path).unwrap();
        let cut: String = text.lines().take(text.lines().count() - 1).map(|l| format!("{l}\n")).collect();
        assert!(matches!(read_transcript(cut.as_bytes()), Err(TranscriptError::Truncated)));
    }
    let bad = "{\"seq\":0,\"event\":\"task_start\"\n";
    assert!(matches!(read_transcript(bad.as_bytes()), Err(TranscriptError::Malformed { line: 1, .. })));
}

fn stubborn_planner_script(task: &str, finishes: usize) -> Vec<ScriptRecord> {
    let mut out = vec![
        ScriptRecord::reply(RoleTag::Generate, r#"{"tables": ["orders"]}"#).for_task(task),
        ScriptRecord::tool(RoleTag::Plan, "generate_testcase", json!({"probes": ["How many orders exist?"]})).for_task(task),
        ScriptRecord::tool(
            RoleTag::Generate,
            "execute_sql",
            json!({"queries": [{"description": "count", "sql_query": "SELECT count(*) FROM orders"}]}),
        )
        .for_task(task)
        .for_probe("p1"),
        ScriptRecord::reply(RoleTag::Generate, "final: 1").for_task(task).for_probe("p1"),
    ];
    for _ in 0..finishes {
        out.push(ScriptRecord::tool(RoleTag::Plan, "finish", json!({"sql": "SELECT 1"})).for_task(task));
    }
    out
}

#[test]
fn planner_budget_exhaustion_falls_back_to_probe_answer() {
    let cfg = toy_config();
    let backend = Arc::new(ScriptedBackend::new(stubborn_planner_script("stuck", 25)));
    let engine = Engine::new(cfg.clone(), backend, DbCatalog::new(toy_dir(), &cfg), Arc::new(SystemClock::new()));
    let run = engine.run_task(&Task::new("stuck", "How many orders exist?", "shop").unwrap());
    assert!(!run.record.succeeded);
    assert_eq!(run.record.counters["planner_recursion_hit"], 1);
    assert_eq!(run.record.counters["planner_calls"], cfg.max_planner_iters as u64);
    assert!(run.events.iter().any(|e| e.event == EventKind::LimitHit));
    assert!(!run.events.iter().any(|e| e.event == EventKind::Error));
    let fb = payload(&run, EventKind::Fallback);
    assert_eq!(fb[0]["source"], "first_final_candidate");
    assert_eq!(run.record.final_sql.as_deref(), Some("SELECT count(*) FROM orders"));
}

#[test]
fn missing_database_is_a_task_failure() {
    let cfg = toy_config();
    let backend = Arc::new(ScriptedBackend::new(Vec::new()));
    let engine = Engine::new(cfg.clone(), backend, DbCatalog::new(toy_dir(), &cfg), Arc::new(SystemClock::new()));
    let run = engine.run_task(&Task::new("gone", "Anything?", "no_such_db").unwrap());
    assert!(!run.record.succeeded);
    assert!(run.record.final_sql.is_none());
    assert_eq!(payload(&run, EventKind::Error).len(), 1);
    assert_eq!(payload(&run, EventKind::Fallback)[0]["source"], "none");
    assert_eq!(run.events.last().unwrap().event, EventKind::TaskEnd);
}
