use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sqlprobe_core::bench::{self, Instance, PredictedRun};
use sqlprobe_core::config::RunConfig;
use sqlprobe_core::dataset::load_tasks;
use sqlprobe_core::executor::DbCatalog;
use sqlprobe_core::gateway::{load_script, ChatBackend, HttpBackend, SystemClock};
use sqlprobe_core::latency::{self, LatencyModelSpec};
use sqlprobe_core::planner::metrics::{HeuristicJudge, PlanMetrics};
use sqlprobe_core::scheduler::{write_outputs, Engine, TaskRunRecord};
use sqlprobe_core::transcript::{read_transcript, render_report, EventKind, TranscriptError};

#[derive(Parser)]
#[command(name = "sqlprobe", version, about = "Probe-driven text-to-SQL runner and scorer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline over a task file.
    Run(RunArgs),
    /// Score one or more run directories against gold SQL.
    Score(ScoreArgs),
    /// Monte Carlo estimate of sequential and parallel wall time.
    SimulateLatency(LatencyArgs),
    /// Self-containment, overlap and size of planned probe suites.
    PlanMetrics(PlanMetricsArgs),
    /// Render a human-readable report from one transcript.
    Replay { transcript: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    /// Task file, one JSON object per line.
    #[arg(long)]
    dataset: PathBuf,
    /// Directory holding `<db_id>.sqlite` files.
    #[arg(long)]
    db_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `key = value` config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `scripted:<path>`, `http:<endpoint>` or a plain http(s) URL.
    #[arg(long)]
    backend: String,
    #[arg(long, value_name = "N|inf")]
    plan_branches: Option<String>,
    #[arg(long, value_name = "N|inf")]
    exec_branches: Option<String>,
    #[arg(long)]
    num_workers: Option<String>,
    #[arg(long)]
    task_workers: Option<String>,
    #[arg(long)]
    requests_per_second: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Run probes one after another.
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    use_gold_schema: bool,
    /// Any other config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Stamp transcript lines with elapsed milliseconds.
    #[arg(long)]
    timestamps: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    gold: PathBuf,
    /// Task file, used to find each instance's database.
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long)]
    db_dir: PathBuf,
    /// Run output directory. Repeat for several runs; ids follow the order given.
    #[arg(long = "run", required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Per-instance CSV report.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also write the summary as JSON.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct LatencyArgs {
    /// `key = value` spec file; defaults apply otherwise.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct PlanMetricsArgs {
    /// A transcript directory, or a JSONL file of probe lists
    /// (`["..", ".."]` or `{"id": .., "probes": [..]}` per line).
    input: PathBuf,
    /// Config file supplying markers and the overlap threshold.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Failure with a specific exit code: 2 for bad input or config, 3 for an
/// unreachable backend.
#[derive(Debug)]
struct Exit(u8, anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for Exit {
    fn from(e: E) -> Self {
        Exit(1, e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Exit {
    Exit(2, e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run(a) => run(a),
        Command::Score(a) => score(a),
        Command::SimulateLatency(a) => simulate_latency(a),
        Command::PlanMetrics(a) => plan_metrics(a),
        Command::Replay { transcript } => replay(&transcript),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Exit(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Exit> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
    RunConfig::from_config_str(&text).with_context(|| format!("config {}", path.display())).map_err(usage)
}

fn build_config(a: &RunArgs) -> Result<RunConfig, Exit> {
    let mut cfg = load_config(a.config.as_deref())?;
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (key, v) in [
        ("plan_branch_limit", &a.plan_branches),
        ("exec_branch_limit", &a.exec_branches),
        ("num_workers", &a.num_workers),
        ("task_workers", &a.task_workers),
        ("requests_per_second", &a.requests_per_second),
        ("seed", &a.seed),
    ] {
        if let Some(v) = v {
            pairs.push((key.into(), v.clone()));
        }
    }
    if a.sequential {
        pairs.push(("sequential_mode".into(), "true".into()));
    }
    if a.use_gold_schema {
        pairs.push(("use_gold_schema".into(), "true".into()));
    }
    for o in &a.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| usage(anyhow!("--set expects KEY=VALUE, got `{o}`")))?;
        pairs.push((k.trim().into(), v.trim().into()));
    }
    for (k, v) in pairs {
        cfg.set(&k, &v).map_err(usage)?;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

/// Opens a TCP connection to the endpoint's host to fail fast when nothing listens.
fn check_reachable(endpoint: &str) -> Result<()> {
    let url = url::Url::parse(endpoint).with_context(|| format!("invalid endpoint `{endpoint}`"))?;
    let host = url.host_str().ok_or_else(|| anyhow!("endpoint `{endpoint}` has no host"))?;
    let port = url.port_or_known_default().ok_or_else(|| anyhow!("endpoint `{endpoint}` has no port"))?;
    let addrs: Vec<_> = (host, port).to_socket_addrs().with_context(|| format!("cannot resolve {host}"))?.collect();
    for addr in &addrs {
        if TcpStream::connect_timeout(addr, Duration::from_secs(5)).is_ok() {
            return Ok(());
        }
    }
    bail!("backend at {endpoint} is unreachable")
}

fn backend(spec: &str) -> Result<Arc<dyn ChatBackend>, Exit> {
    if let Some(path) = spec.strip_prefix("scripted:") {
        return Ok(Arc::new(load_script(Path::new(path)).map_err(usage)?));
    }
    let endpoint = if spec.starts_with("http://") || spec.starts_with("https://") {
        Some(spec)
    } else {
        spec.strip_prefix("http:")
    };
    if let Some(endpoint) = endpoint {
        let b = HttpBackend::new(&endpoint).map_err(|e| Exit(3, e.into()))?;
        check_reachable(b.endpoint()).map_err(|e| Exit(3, e))?;
        return Ok(Arc::new(b));
    }
    Err(usage(anyhow!("--backend must be `scripted:<path>` or `http:<endpoint>`, got `{spec}`")))
}

fn run(a: RunArgs) -> Result<(), Exit> {
    let cfg = build_config(&a)?;
    let tasks = load_tasks(&a.dataset).map_err(usage)?;
    let backend = backend(&a.backend)?;
    let catalog = DbCatalog::new(&a.db_dir, &cfg);
    let engine = Engine::new(cfg, backend, catalog, Arc::new(SystemClock::new())).with_timestamps(a.timestamps);
    let runs = engine.run_dataset(&tasks);
    let summary = write_outputs(&a.out, &runs, a.timestamps).with_context(|| format!("writing {}", a.out.display()))?;
    println!("tasks: {}  succeeded: {}  failed: {}", summary.tasks, summary.succeeded, summary.failed);
    println!("avg wall (min): {:.3}", summary.all.avg_wall_minutes);
    for (k, v) in &summary.all.averages {
        println!("avg {k}: {v:.2}");
    }
    println!("outputs in {}", a.out.display());
    Ok(())
}

fn read_run(dir: &Path, run_id: usize, ids: &[String]) -> Result<BTreeMap<String, PredictedRun>, Exit> {
    let mut walls: BTreeMap<String, u64> = BTreeMap::new();
    let records = dir.join("reports/records.jsonl");
    if records.exists() {
        for line in fs::read_to_string(&records)?.lines().filter(|l| !l.trim().is_empty()) {
            let r: TaskRunRecord = serde_json::from_str(line).with_context(|| format!("{}", records.display())).map_err(usage)?;
            walls.insert(r.instance_id, r.wall_millis);
        }
    }
    let mut out = BTreeMap::new();
    for id in ids {
        let path = dir.join("predictions").join(format!("{id}.sql"));
        let final_sql = fs::read_to_string(&path).ok().map(|s| s.trim().to_string()).filter(|s| !s.is_empty());
        out.insert(id.clone(), PredictedRun { run_id, final_sql, wall_millis: walls.get(id).copied() });
    }
    Ok(out)
}

fn score(a: ScoreArgs) -> Result<(), Exit> {
    let gold = bench::load_gold(&a.gold).map_err(usage)?;
    let tasks = load_tasks(&a.tasks).map_err(usage)?;
    let db_of: BTreeMap<_, _> = tasks.iter().map(|t| (t.instance_id.clone(), t.db_id.clone())).collect();
    let catalog = DbCatalog::new(&a.db_dir, &RunConfig::default());
    let mut instances = Vec::new();
    for g in gold {
        let db_id = db_of.get(&g.instance_id).ok_or_else(|| usage(anyhow!("no task for gold instance {}", g.instance_id)))?;
        instances.push(Instance { db: catalog.get(db_id).map_err(usage)?, gold: g });
    }
    let ids: Vec<String> = instances.iter().map(|i| i.gold.instance_id.clone()).collect();
    let mut runs: BTreeMap<String, Vec<PredictedRun>> = BTreeMap::new();
    for (i, dir) in a.runs.iter().enumerate() {
        for (id, p) in read_run(dir, i + 1, &ids)? {
            runs.entry(id).or_default().push(p);
        }
    }
    let score = bench::score_dataset(&instances, &runs, a.k).map_err(usage)?;
    if let Some(path) = &a.report {
        bench::write_report_csv(fs::File::create(path)?, &score)?;
    }
    if let Some(path) = &a.summary {
        let mut v = serde_json::to_value(&score)?;
        if let Some(m) = v.as_object_mut() {
            m.remove("results");
        }
        fs::write(path, serde_json::to_string_pretty(&v)? + "\n")?;
    }
    print!("{}", bench::render_summary(&score));
    Ok(())
}

fn simulate_latency(a: LatencyArgs) -> Result<(), Exit> {
    let mut spec = match &a.spec {
        Some(p) => LatencyModelSpec::from_config_str(&fs::read_to_string(p).map_err(usage)?).map_err(usage)?,
        None => LatencyModelSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(t) = a.trials {
        spec.trials = t;
    }
    spec.validate().map_err(usage)?;
    let samples = latency::simulate(&spec)?;
    let est = latency::summarize(&samples)?;
    if let Some(path) = &a.csv {
        latency::write_csv(fs::File::create(path)?, &samples, &est)?;
    }
    println!("trials: {}", est.trials);
    println!("sequential mean: {:.1}s (95% CI {:.1} to {:.1})", est.seq_mean, est.seq_ci95.lo, est.seq_ci95.hi);
    println!("parallel mean: {:.1}s (95% CI {:.1} to {:.1})", est.par_mean, est.par_ci95.lo, est.par_ci95.hi);
    println!("ratio: {:.2}", est.ratio);
    Ok(())
}

fn suites_from_transcripts(dir: &Path) -> Result<Vec<(String, Vec<String>)>, Exit> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let lines = read_transcript(BufReader::new(fs::File::open(&p)?))
            .with_context(|| format!("{}", p.display()))
            .map_err(usage)?;
        let probes: Vec<String> = lines
            .iter()
            .filter(|l| l.event == EventKind::Plan)
            .flat_map(|l| l.payload["probes"].as_array().cloned().unwrap_or_default())
            .filter_map(|p| p["text"].as_str().map(str::to_string))
            .collect();
        let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        out.push((id, probes));
    }
    Ok(out)
}

fn suites_from_file(path: &Path) -> Result<Vec<(String, Vec<String>)>, Exit> {
    let mut out = Vec::new();
    for (i, line) in fs::read_to_string(path)?.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value =
            serde_json::from_str(line).with_context(|| format!("{} line {}", path.display(), i + 1)).map_err(usage)?;
        let (id, list) = match &v {
            serde_json::Value::Array(_) => (format!("suite{}", i + 1), &v),
            _ => (v["id"].as_str().map_or(format!("suite{}", i + 1), str::to_string), &v["probes"]),
        };
        let probes = list
            .as_array()
            .and_then(|a| a.iter().map(|p| p.as_str().map(str::to_string)).collect::<Option<Vec<_>>>())
            .ok_or_else(|| usage(anyhow!("{} line {}: expected a list of probe strings", path.display(), i + 1)))?;
        out.push((id, probes));
    }
    Ok(out)
}

fn plan_metrics(a: PlanMetricsArgs) -> Result<(), Exit> {
    let cfg = load_config(a.config.as_deref())?;
    let judge = HeuristicJudge::from_config(&cfg);
    let suites = if a.input.is_dir() { suites_from_transcripts(&a.input)? } else { suites_from_file(&a.input)? };
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "suite\tSCR\tOR\t#TC")?;
    let mut total = PlanMetrics::default();
    for (id, probes) in &suites {
        let m = judge.metrics(probes);
        writeln!(stdout, "{id}\t{:.3}\t{:.3}\t{}", m.self_containment_rate, m.overlap_rate, m.num_test_cases)?;
        total.self_containment_rate += m.self_containment_rate;
        total.overlap_rate += m.overlap_rate;
        total.num_test_cases += m.num_test_cases;
    }
    if !suites.is_empty() {
        let n = suites.len() as f64;
        writeln!(
            stdout,
            "mean\t{:.3}\t{:.3}\t{:.2}",
            total.self_containment_rate / n,
            total.overlap_rate / n,
            total.num_test_cases / n
        )?;
    }
    Ok(())
}

fn replay(path: &Path) -> Result<(), Exit> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display())).map_err(usage)?;
    match read_transcript(BufReader::new(file)) {
        Ok(lines) => {
            print!("{}", render_report(&lines));
            Ok(())
        }
        Err(e @ (TranscriptError::Malformed { .. } | TranscriptError::Truncated)) => Err(usage(e)),
        Err(e) => Err(e.into()),
    }
}
