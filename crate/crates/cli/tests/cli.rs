use std::path::PathBuf;
use std::process::{Command, Output};

fn toy() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/toy")
}

fn sqlprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sqlprobe")).args(args).output().unwrap()
}

fn p(path: &std::path::Path) -> &str {
    path.to_str().unwrap()
}

fn run_toy(out: &std::path::Path, extra: &[&str]) -> Output {
    let t = toy();
    let mut args: Vec<String> = vec![
        "run".into(),
        "--dataset".into(),
        p(&t.join("tasks.jsonl")).into(),
        "--db-dir".into(),
        p(&t).into(),
        "--config".into(),
        p(&t.join("toy.conf")).into(),
        "--out".into(),
        p(out).into(),
        "--backend".into(),
        format!("scripted:{}", p(&t.join("script.jsonl"))),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    sqlprobe(&refs)
}

#[test]
fn run_then_score() {
    let t = toy();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let res = run_toy(&out, &["--task-workers", "2"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stdout).contains("succeeded: 12"));
    assert!(out.join("predictions/shop_001.sql").exists());
    assert!(out.join("reports/summary.json").exists());

    let csv = dir.path().join("report.csv");
    let summary = dir.path().join("score.json");
    let res = sqlprobe(&[
        "score",
        "--gold",
        p(&t.join("gold.jsonl")),
        "--tasks",
        p(&t.join("tasks.jsonl")),
        "--db-dir",
        p(&t),
        "--run",
        p(&out),
        "--report",
        p(&csv),
        "--summary",
        p(&summary),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = String::from_utf8_lossy(&res.stdout);
    // weather_004 is scripted to predict the wrong rows.
    assert!(text.contains("EX: 91.7"), "{text}");
    let report = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(report.lines().count(), 13);
    assert!(report.lines().any(|l| l.starts_with("weather_004,0,")));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(json["instances"], 12);
}

#[test]
fn bad_config_key_exits_2_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let res = run_toy(&dir.path().join("o"), &["--set", "num_wrokers=3"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("num_wrokers"));

    let res = run_toy(&dir.path().join("o"), &["--plan-branches", "0"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("plan_branch_limit"));
}

#[test]
fn unreachable_backend_exits_3() {
    let t = toy();
    let dir = tempfile::tempdir().unwrap();
    // Bind then drop a listener to get a port with nothing on it.
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let backend = format!("http://127.0.0.1:{port}/v1");
    let res = sqlprobe(&[
        "run",
        "--dataset",
        p(&t.join("tasks.jsonl")),
        "--db-dir",
        p(&t),
        "--out",
        p(dir.path()),
        "--backend",
        &backend,
    ]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn simulate_latency_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("lat.csv");
    let res = sqlprobe(&["simulate-latency", "--trials", "500", "--seed", "3", "--csv", p(&csv)]);
    assert!(res.status.success());
    assert!(String::from_utf8_lossy(&res.stdout).contains("ratio:"));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("mode,trial,seconds"));
    assert_eq!(text.lines().count(), 1 + 1000 + 3);

    let spec = dir.path().join("spec.conf");
    std::fs::write(&spec, "k1 = 3\nk3 = 2\n").unwrap();
    let res = sqlprobe(&["simulate-latency", "--spec", p(&spec)]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn plan_metrics_from_file_and_transcripts() {
    let dir = tempfile::tempdir().unwrap();
    let suites = dir.path().join("suites.jsonl");
    std::fs::write(&suites, "[\"Count the orders.\", \"Count the orders.\"]\n{\"id\": \"x\", \"probes\": [\"Join with the previous result\"]}\n")
        .unwrap();
    let res = sqlprobe(&["plan-metrics", p(&suites)]);
    assert!(res.status.success());
    let text = String::from_utf8_lossy(&res.stdout);
    assert!(text.contains("suite1\t1.000\t1.000\t2"), "{text}");
    assert!(text.contains("x\t0.000\t0.000\t1"), "{text}");

    let out = dir.path().join("run");
    assert!(run_toy(&out, &[]).status.success());
    let res = sqlprobe(&["plan-metrics", p(&out.join("transcripts"))]);
    assert!(res.status.success());
    assert_eq!(String::from_utf8_lossy(&res.stdout).lines().count(), 1 + 12 + 1);
}

#[test]
fn replay_renders_and_rejects_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(run_toy(&out, &[]).status.success());
    let path = out.join("transcripts/school_001.jsonl");
    let res = sqlprobe(&["replay", p(&path)]);
    assert!(res.status.success());
    let text = String::from_utf8_lossy(&res.stdout);
    assert!(text.starts_with("Task school_001 on school"), "{text}");

    let full = std::fs::read_to_string(&path).unwrap();
    let cut = dir.path().join("cut.jsonl");
    std::fs::write(&cut, full.lines().take(5).collect::<Vec<_>>().join("\n")).unwrap();
    assert_eq!(sqlprobe(&["replay", p(&cut)]).status.code(), Some(2));
    std::fs::write(&cut, "not json\n").unwrap();
    assert_eq!(sqlprobe(&["replay", p(&cut)]).status.code(), Some(2));
}
