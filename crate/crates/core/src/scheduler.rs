//! Per-task pipeline and the dataset runner.
//!
//! A task runs schema linking, one planning call, then rounds of parallel
//! probe generation followed by planner decisions until the planner
//! finishes or runs out of budget. Tasks of a dataset run on their own pool.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agent::{AgentContext, AgentError};
use crate::config::RunConfig;
use crate::evidence::{cluster_evidence, EvidenceBundle, EvidenceEntry};
use crate::executor::DbCatalog;
use crate::gateway::{ChatBackend, Clock, Gateway};
use crate::generator::{link_schema, run_all, GeneratorOutcome};
use crate::par;
use crate::planner::{fallback, plan, step, Decision, PlannerState, Proposal};
use crate::prompts::PromptSet;
use crate::proposer::propose;
use crate::transcript::{write_transcript, Event, EventKind, Trace};
use crate::types::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRunRecord {
    pub instance_id: String,
    pub final_sql: Option<String>,
    pub succeeded: bool,
    pub wall_millis: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub counters: BTreeMap<String, u64>,
}

#[derive(Debug, Clone)]
pub struct TaskRun {
    pub record: TaskRunRecord,
    pub events: Vec<Event>,
}

pub struct Engine {
    pub cfg: RunConfig,
    pub gateway: Arc<Gateway>,
    pub catalog: Arc<DbCatalog>,
    pub prompts: Arc<PromptSet>,
    /// Stamp transcript events with the gateway clock.
    pub timestamps: bool,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("cfg", &self.cfg).field("catalog", &self.catalog).finish_non_exhaustive()
    }
}

fn entry_json((probe, cand): &EvidenceEntry) -> serde_json::Value {
    json!({
        "probe_id": probe.probe_id,
        "sql": cand.sql,
        "kind": cand.kind().map(|k| k.to_string()),
    })
}

fn selection(outcomes: &[GeneratorOutcome]) -> BTreeMap<String, String> {
    outcomes.iter().filter_map(|o| o.final_sql.clone().map(|s| (o.probe.probe_id.clone(), s))).collect()
}

impl Engine {
    pub fn new(cfg: RunConfig, backend: Arc<dyn ChatBackend>, catalog: DbCatalog, clock: Arc<dyn Clock>) -> Self {
        let gateway = Gateway::new(backend, &cfg, clock);
        Engine {
            cfg,
            gateway: Arc::new(gateway),
            catalog: Arc::new(catalog),
            prompts: Arc::new(PromptSet::builtin()),
            timestamps: false,
        }
    }

    pub fn with_prompts(mut self, prompts: PromptSet) -> Self {
        self.prompts = Arc::new(prompts);
        self
    }

    pub fn with_timestamps(mut self, on: bool) -> Self {
        self.timestamps = on;
        self
    }

    pub fn run_task(&self, task: &Task) -> TaskRun {
        let started = Instant::now();
        let mut trace = if self.timestamps { Trace::timed(self.gateway.clock().clone()) } else { Trace::new() };
        trace.push(
            EventKind::TaskStart,
            None,
            None,
            json!({"instance_id": task.instance_id, "db_id": task.db_id, "question": task.question}),
        );
        let mut state = PlannerState::new(task.clone());
        let mut bundle = EvidenceBundle::default();
        let result = self.pipeline(task, &mut trace, &mut state, &mut bundle);

        let (final_sql, succeeded, error) = match result {
            Ok(sql) => (Some(sql), true, None),
            Err(e) => {
                if !matches!(e, AgentError::IterationLimit { .. }) {
                    trace.push(EventKind::Error, None, None, json!({"message": e.to_string()}));
                }
                let fb = fallback(&state, &bundle);
                if let Some((source, sql)) = &fb {
                    trace.push(EventKind::Fallback, None, None, json!({"source": source, "sql": sql}));
                } else {
                    trace.push(EventKind::Fallback, None, None, json!({"source": "none", "sql": null}));
                }
                (fb.map(|(_, sql)| sql), false, Some(e.to_string()))
            }
        };
        let counters = trace.counters.to_map();
        trace.push(
            EventKind::TaskEnd,
            None,
            None,
            json!({"succeeded": succeeded, "final_sql": final_sql, "error": error, "counters": counters}),
        );
        let wall_millis = (started.elapsed().as_millis() as u64).max(1);
        TaskRun {
            record: TaskRunRecord { instance_id: task.instance_id.clone(), final_sql, succeeded, wall_millis, error, counters },
            events: trace.events,
        }
    }

    fn pipeline(
        &self,
        task: &Task,
        trace: &mut Trace,
        state: &mut PlannerState,
        bundle: &mut EvidenceBundle,
    ) -> Result<String, AgentError> {
        task.validate().map_err(|e| AgentError::Exec(crate::executor::ExecError::DbUnavailable {
            db_id: task.db_id.clone(),
            reason: e.to_string(),
        }))?;
        let db = self.catalog.get(&task.db_id)?;
        let ctx = AgentContext { cfg: &self.cfg, gateway: &self.gateway, db: &db, prompts: &self.prompts, task };
        let schema = link_schema(&ctx, trace)?;
        let mut probes = plan(&ctx, state, trace)?;
        let mut outcomes: Vec<GeneratorOutcome> = Vec::new();

        loop {
            let round = run_all(&ctx, &probes, &schema, trace);
            state.update_probes(&round.iter().map(|o| o.probe.clone()).collect::<Vec<_>>());
            outcomes.extend(round);
            let candidates: Vec<_> = outcomes.iter().flat_map(|o| o.candidates.iter().cloned()).collect();
            let all_probes: Vec<_> = outcomes.iter().map(|o| o.probe.clone()).collect();
            *bundle = cluster_evidence(&all_probes, &candidates, &selection(&outcomes))
                .map_err(|e| AgentError::Prompt(crate::prompts::PromptError::Io { path: "evidence".into(), reason: e.to_string() }))?;
            let mut ev = serde_json::Map::new();
            for (name, entries) in bundle.clusters() {
                ev.insert(name.into(), entries.iter().map(entry_json).collect());
            }
            trace.push(EventKind::Evidence, None, None, serde_json::Value::Object(ev));

            loop {
                match step(&ctx, state, bundle, trace)? {
                    Decision::MoreProbes(ps) => {
                        probes = ps;
                        break;
                    }
                    Decision::Propose => match propose(&ctx, bundle, trace) {
                        Ok(r) => state.record_proposal(Proposal {
                            sql: r.sql,
                            feedback: r.feedback,
                            verdict: r.verdict,
                            succeeded: r.succeeded,
                        }),
                        Err(AgentError::EmptyEvidence) => {
                            state.add_note("no probe produced any SQL yet, so there is nothing to propose from")
                        }
                        Err(AgentError::NoSqlProduced) => state.add_note("the proposer did not return any SQL"),
                        Err(e) => return Err(e),
                    },
                    Decision::Finish(sql) => return Ok(sql),
                }
            }
        }
    }

    /// Runs tasks on `task_workers` threads; output order follows input order.
    pub fn run_dataset(&self, tasks: &[Task]) -> Vec<TaskRun> {
        par::map_bounded(tasks.to_vec(), self.cfg.task_workers, |t| self.run_task(&t))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub tasks: usize,
    pub avg_wall_minutes: f64,
    pub averages: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub tasks: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub all: GroupSummary,
    pub succeeded_only: GroupSummary,
    pub failed_only: GroupSummary,
}

fn group(records: &[&TaskRunRecord]) -> GroupSummary {
    let n = records.len();
    if n == 0 {
        return GroupSummary::default();
    }
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for r in records {
        for (k, v) in &r.counters {
            *sums.entry(k.clone()).or_default() += *v as f64;
        }
    }
    GroupSummary {
        tasks: n,
        avg_wall_minutes: records.iter().map(|r| r.wall_millis as f64 / 60_000.0).sum::<f64>() / n as f64,
        averages: sums.into_iter().map(|(k, v)| (k, v / n as f64)).collect(),
    }
}

pub fn summarize(records: &[TaskRunRecord]) -> RunSummary {
    let all: Vec<&TaskRunRecord> = records.iter().collect();
    let ok: Vec<&TaskRunRecord> = records.iter().filter(|r| r.succeeded).collect();
    let bad: Vec<&TaskRunRecord> = records.iter().filter(|r| !r.succeeded).collect();
    RunSummary {
        tasks: records.len(),
        succeeded: ok.len(),
        failed: bad.len(),
        all: group(&all),
        succeeded_only: group(&ok),
        failed_only: group(&bad),
    }
}

/// Writes `predictions/`, `transcripts/` and `reports/` under `out`.
pub fn write_outputs(out: &Path, runs: &[TaskRun], timestamps: bool) -> std::io::Result<RunSummary> {
    let pred = out.join("predictions");
    let trans = out.join("transcripts");
    let reports = out.join("reports");
    for d in [&pred, &trans, &reports] {
        fs::create_dir_all(d)?;
    }
    let mut records = Vec::new();
    for run in runs {
        let id = &run.record.instance_id;
        let mut sql = run.record.final_sql.clone().unwrap_or_default();
        if !sql.is_empty() && !sql.ends_with('\n') {
            sql.push('\n');
        }
        fs::write(pred.join(format!("{id}.sql")), sql)?;
        let mut w = BufWriter::new(fs::File::create(trans.join(format!("{id}.jsonl")))?);
        write_transcript(&mut w, &run.events, timestamps)?;
        std::io::Write::flush(&mut w)?;
        records.push(run.record.clone());
    }
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    fs::write(reports.join("records.jsonl"), lines)?;
    let summary = summarize(&records);
    fs::write(reports.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(ok: bool, llm: u64, ms: u64) -> TaskRunRecord {
        TaskRunRecord {
            instance_id: "x".into(),
            final_sql: None,
            succeeded: ok,
            wall_millis: ms,
            error: None,
            counters: BTreeMap::from([("llm_calls".to_string(), llm)]),
        }
    }

    #[test]
    fn summary_splits_groups() {
        let s = summarize(&[rec(true, 4, 60_000), rec(false, 10, 120_000), rec(true, 6, 60_000)]);
        assert_eq!((s.tasks, s.succeeded, s.failed), (3, 2, 1));
        assert_eq!(s.succeeded_only.averages["llm_calls"], 5.0);
        assert_eq!(s.failed_only.avg_wall_minutes, 2.0);
        assert_eq!(summarize(&[]).all, GroupSummary::default());
    }
}
