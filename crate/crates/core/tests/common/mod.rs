#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use sqlprobe_core::config::RunConfig;
use sqlprobe_core::dataset::load_tasks;
use sqlprobe_core::executor::DbCatalog;
use sqlprobe_core::gateway::{load_script, SystemClock};
use sqlprobe_core::scheduler::{write_outputs, Engine, RunSummary, TaskRun};
use sqlprobe_core::types::Task;

pub fn toy_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join("toy")
}

pub fn toy_config() -> RunConfig {
    RunConfig::from_config_str(&std::fs::read_to_string(toy_dir().join("toy.conf")).unwrap()).unwrap()
}

pub fn toy_tasks() -> Vec<Task> {
    load_tasks(&toy_dir().join("tasks.jsonl")).unwrap()
}

pub fn toy_engine(cfg: RunConfig) -> Engine {
    let backend = Arc::new(load_script(&toy_dir().join("script.jsonl")).unwrap());
    let catalog = DbCatalog::new(toy_dir(), &cfg);
    Engine::new(cfg, backend, catalog, Arc::new(SystemClock::new()))
}

/// Runs the whole toy dataset into `out` and returns the per-task runs.
pub fn run_toy(cfg: RunConfig, out: &Path) -> (RunSummary, Vec<TaskRun>) {
    let engine = toy_engine(cfg);
    let runs = engine.run_dataset(&toy_tasks());
    let summary = write_outputs(out, &runs, false).unwrap();
    (summary, runs)
}

/// Every file under `dir`, relative path to contents, in sorted order.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().replace('\\', "/");
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
