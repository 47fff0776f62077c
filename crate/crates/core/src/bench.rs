//! Execution-accuracy scoring: EX, EX@k and majority consensus over runs.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{AdapterError, DbHandle, SqlAdapter, Value};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("gold SQL for `{instance_id}` failed to execute: {message}")]
    GoldExecution { instance_id: String, message: String },
    #[error("instance `{instance_id}` has {found} runs, {expected} required")]
    MissingRuns { instance_id: String, expected: usize, found: usize },
    #[error("gold file line {line}: {message}")]
    Gold { line: usize, message: String },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Relative tolerance for numeric cells.
pub const REL_TOL: f64 = 1e-6;

/// Largest result for which unordered comparison tries a full row matching.
const MATCHING_LIMIT: usize = 2000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub instance_id: String,
    pub gold_sql: String,
    /// Overrides ORDER BY detection when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order_sensitive: Option<bool>,
}

impl GoldRecord {
    pub fn is_order_sensitive(&self) -> bool {
        self.order_sensitive.unwrap_or_else(|| has_top_level_order_by(&self.gold_sql))
    }
}

pub fn parse_gold(text: &str) -> Result<Vec<GoldRecord>, BenchError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let g: GoldRecord =
            serde_json::from_str(raw).map_err(|e| BenchError::Gold { line, message: e.to_string() })?;
        if g.instance_id.trim().is_empty() || g.gold_sql.trim().is_empty() {
            return Err(BenchError::Gold { line, message: "instance_id and gold_sql must be non-empty".into() });
        }
        if !seen.insert(g.instance_id.clone()) {
            return Err(BenchError::Gold { line, message: format!("duplicate instance_id `{}`", g.instance_id) });
        }
        out.push(g);
    }
    Ok(out)
}

pub fn load_gold(path: &Path) -> Result<Vec<GoldRecord>, BenchError> {
    parse_gold(&std::fs::read_to_string(path)?)
}

/// True when `sql` has an ORDER BY outside parentheses, strings and comments.
pub fn has_top_level_order_by(sql: &str) -> bool {
    let b = sql.as_bytes();
    let mut depth = 0i32;
    let mut words: Vec<String> = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let c = b[i];
        match c {
            b'\'' | b'"' | b'`' => {
                i += 1;
                while i < b.len() {
                    if b[i] == c {
                        if i + 1 < b.len() && b[i + 1] == c {
                            i += 2;
                            continue;
                        }
                        break;
                    }
                    i += 1;
                }
                words.clear();
            }
            b'-' if b.get(i + 1) == Some(&b'-') => {
                while i < b.len() && b[i] != b'\n' {
                    i += 1;
                }
            }
            b'/' if b.get(i + 1) == Some(&b'*') => {
                i += 2;
                while i + 1 < b.len() && !(b[i] == b'*' && b[i + 1] == b'/') {
                    i += 1;
                }
                i += 1;
            }
            b'(' => {
                depth += 1;
                words.clear();
            }
            b')' => {
                depth -= 1;
                words.clear();
            }
            _ if c.is_ascii_alphanumeric() || c == b'_' => {
                let start = i;
                while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'_') {
                    i += 1;
                }
                if depth == 0 {
                    let w = sql[start..i].to_ascii_uppercase();
                    if w == "BY" && words.last().is_some_and(|p| p == "ORDER") {
                        return true;
                    }
                    words.push(w);
                }
                continue;
            }
            _ if c.is_ascii_whitespace() => {}
            _ => words.clear(),
        }
        i += 1;
    }
    false
}

fn numeric(v: &Value) -> Option<f64> {
    match v {
        Value::Integer(i) => Some(*i as f64),
        Value::Real(r) => Some(*r),
        _ => None,
    }
}

pub fn cells_match(a: &Value, b: &Value) -> bool {
    if let (Some(x), Some(y)) = (numeric(a), numeric(b)) {
        if x == y {
            return true;
        }
        if x.is_nan() || y.is_nan() {
            return x.is_nan() && y.is_nan();
        }
        return (x - y).abs() <= REL_TOL * x.abs().max(y.abs());
    }
    match (a, b) {
        (Value::Null, Value::Null) => true,
        (Value::Text(x), Value::Text(y)) => x.trim_end() == y.trim_end(),
        (Value::Blob(x), Value::Blob(y)) => x == y,
        _ => false,
    }
}

pub fn rows_match(a: &[Value], b: &[Value]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| cells_match(x, y))
}

/// Stable text form of a cell; numbers keep 9 significant digits.
pub fn canonical_cell(v: &Value) -> String {
    match v {
        Value::Null => "N".into(),
        Value::Integer(_) | Value::Real(_) => {
            let x = numeric(v).unwrap_or_default();
            let x = if x == 0.0 { 0.0 } else { x };
            format!("n{x:.8e}")
        }
        Value::Text(s) => format!("s{}", s.trim_end()),
        Value::Blob(b) => format!("b{}", hex::encode(b)),
    }
}

pub fn canonical_row(row: &[Value]) -> String {
    row.iter().map(canonical_cell).collect::<Vec<_>>().join("\u{1f}")
}

/// Whether the two row lists are equal, as sequences or as multisets.
pub fn results_match(pred: &[Vec<Value>], gold: &[Vec<Value>], order_sensitive: bool) -> bool {
    if pred.len() != gold.len() {
        return false;
    }
    if order_sensitive {
        return pred.iter().zip(gold).all(|(p, g)| rows_match(p, g));
    }
    fn sorted(rows: &[Vec<Value>]) -> Vec<(String, &Vec<Value>)> {
        let mut v: Vec<(String, &Vec<Value>)> = rows.iter().map(|r| (canonical_row(r), r)).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }
    let (p, g) = (sorted(pred), sorted(gold));
    if p.iter().zip(&g).all(|(a, b)| rows_match(a.1, b.1)) {
        return true;
    }
    // Tolerance can pair rows that sort apart; fall back to a full matching
    // while that stays cheap.
    pred.len() <= MATCHING_LIMIT && perfect_matching(pred, gold)
}

fn perfect_matching(pred: &[Vec<Value>], gold: &[Vec<Value>]) -> bool {
    let n = pred.len();
    let adj: Vec<Vec<usize>> =
        pred.iter().map(|p| (0..n).filter(|&j| rows_match(p, &gold[j])).collect()).collect();
    let mut owner: Vec<Option<usize>> = vec![None; n];
    fn augment(i: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &j in &adj[i] {
            if seen[j] {
                continue;
            }
            seen[j] = true;
            if owner[j].is_none_or(|k| augment(k, adj, seen, owner)) {
                owner[j] = Some(i);
                return true;
            }
        }
        false
    }
    (0..n).all(|i| augment(i, &adj, &mut vec![false; n], &mut owner))
}

/// Executes both queries and compares their results. A failing prediction
/// is a mismatch; a failing gold query is an error.
pub fn ex_match(db: &dyn SqlAdapter, predicted_sql: &str, gold_sql: &str, order_sensitive: bool) -> Result<bool, BenchError> {
    let gold = db.query(gold_sql, None).map_err(|e| BenchError::GoldExecution {
        instance_id: db.db_id().to_string(),
        message: e.to_string(),
    })?;
    Ok(match db.query(predicted_sql, None) {
        Ok(pred) => results_match(&pred.rows, &gold.rows, order_sensitive),
        Err(_) => false,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CanonicalResult {
    Failed,
    Rows(Vec<String>),
}

pub fn canonicalize(result: Result<&[Vec<Value>], &AdapterError>, order_sensitive: bool) -> CanonicalResult {
    match result {
        Err(_) => CanonicalResult::Failed,
        Ok(rows) => {
            let mut v: Vec<String> = rows.iter().map(|r| canonical_row(r)).collect();
            if !order_sensitive {
                v.sort();
            }
            CanonicalResult::Rows(v)
        }
    }
}

pub fn canonical_result(db: &dyn SqlAdapter, sql: Option<&str>, order_sensitive: bool) -> CanonicalResult {
    match sql.filter(|s| !s.trim().is_empty()) {
        None => CanonicalResult::Failed,
        Some(sql) => match db.query(sql, None) {
            Ok(q) => canonicalize(Ok(&q.rows), order_sensitive),
            Err(e) => canonicalize(Err(&e), order_sensitive),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusRun {
    pub run_id: usize,
    pub final_sql: String,
    pub result: CanonicalResult,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConsensusInput {
    pub runs: Vec<ConsensusRun>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusChoice {
    pub run_id: usize,
    pub final_sql: String,
    pub votes: usize,
    pub all_failed: bool,
}

/// Largest group of identical successful results wins; ties go to the group
/// holding the smallest run id. `None` only for an empty input.
pub fn majority_consensus(input: &ConsensusInput) -> Option<ConsensusChoice> {
    let first = input.runs.iter().min_by_key(|r| r.run_id)?;
    let mut groups: BTreeMap<&CanonicalResult, (usize, &ConsensusRun)> = BTreeMap::new();
    for r in input.runs.iter().filter(|r| r.result != CanonicalResult::Failed) {
        let e = groups.entry(&r.result).or_insert((0, r));
        e.0 += 1;
        if r.run_id < e.1.run_id {
            e.1 = r;
        }
    }
    let best = groups.values().max_by(|a, b| a.0.cmp(&b.0).then(b.1.run_id.cmp(&a.1.run_id)));
    Some(match best {
        Some((votes, run)) => {
            ConsensusChoice { run_id: run.run_id, final_sql: run.final_sql.clone(), votes: *votes, all_failed: false }
        }
        None => ConsensusChoice {
            run_id: first.run_id,
            final_sql: first.final_sql.clone(),
            votes: input.runs.len(),
            all_failed: true,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedRun {
    pub run_id: usize,
    pub final_sql: Option<String>,
    #[serde(default)]
    pub wall_millis: Option<u64>,
}

/// One scored instance: its database and gold record.
#[derive(Clone)]
pub struct Instance {
    pub db: DbHandle,
    pub gold: GoldRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExResult {
    pub instance_id: String,
    pub predicted_sql: String,
    pub ex: bool,
    pub ex_at_k: bool,
    pub chosen_run: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub k: usize,
    pub instances: usize,
    pub ex: f64,
    pub ex_at_k: f64,
    /// Over every run with a recorded wall time; 0 when none has one.
    pub avg_wall_minutes: f64,
    pub results: Vec<ExResult>,
}

/// EX on the consensus pick and EX@k over the first `k` runs by id.
pub fn score_dataset(
    instances: &[Instance],
    runs: &BTreeMap<String, Vec<PredictedRun>>,
    k: usize,
) -> Result<DatasetScore, BenchError> {
    if k == 0 {
        return Err(BenchError::ZeroK);
    }
    let mut results = Vec::with_capacity(instances.len());
    let mut walls = Vec::new();
    for inst in instances {
        let id = &inst.gold.instance_id;
        let mut mine: Vec<&PredictedRun> = runs.get(id).map(|v| v.iter().collect()).unwrap_or_default();
        if mine.len() < k {
            return Err(BenchError::MissingRuns { instance_id: id.clone(), expected: k, found: mine.len() });
        }
        mine.sort_by_key(|r| r.run_id);
        mine.truncate(k);
        walls.extend(mine.iter().filter_map(|r| r.wall_millis));

        let order = inst.gold.is_order_sensitive();
        let db = inst.db.as_ref();
        let gold = db.query(&inst.gold.gold_sql, None);
        let input = ConsensusInput {
            runs: mine
                .iter()
                .map(|r| ConsensusRun {
                    run_id: r.run_id,
                    final_sql: r.final_sql.clone().unwrap_or_default(),
                    result: canonical_result(db, r.final_sql.as_deref(), order),
                })
                .collect(),
        };
        let choice = majority_consensus(&input).expect("k >= 1 runs");
        let matches = |sql: &str| -> bool {
            match (&gold, sql.trim().is_empty()) {
                (Ok(g), false) => db.query(sql, None).is_ok_and(|p| results_match(&p.rows, &g.rows, order)),
                _ => false,
            }
        };
        let (ex, ex_at_k, detail) = match &gold {
            Err(e) => (false, false, format!("gold failed: {e}")),
            Ok(_) => {
                let ex = matches(&choice.final_sql);
                let any = ex || input.runs.iter().any(|r| matches(&r.final_sql));
                let detail = if choice.all_failed {
                    "all runs failed".to_string()
                } else {
                    format!("{} of {} runs agree", choice.votes, k)
                };
                (ex, any, detail)
            }
        };
        results.push(ExResult {
            instance_id: id.clone(),
            predicted_sql: choice.final_sql,
            ex,
            ex_at_k,
            chosen_run: choice.run_id,
            detail,
        });
    }
    let n = results.len();
    let frac = |f: &dyn Fn(&ExResult) -> bool| if n == 0 { 0.0 } else { results.iter().filter(|r| f(r)).count() as f64 / n as f64 };
    let ex = frac(&|r| r.ex);
    let ex_at_k = frac(&|r| r.ex_at_k);
    let avg_wall_minutes =
        if walls.is_empty() { 0.0 } else { walls.iter().map(|&m| m as f64 / 60_000.0).sum::<f64>() / walls.len() as f64 };
    Ok(DatasetScore { k, instances: n, ex, ex_at_k, avg_wall_minutes, results })
}

pub fn write_report_csv<W: Write>(out: W, score: &DatasetScore) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["instance_id", "ex", "ex_at_k", "chosen_run", "detail", "predicted_sql"])?;
    for r in &score.results {
        w.write_record([
            r.instance_id.as_str(),
            if r.ex { "1" } else { "0" },
            if r.ex_at_k { "1" } else { "0" },
            &r.chosen_run.to_string(),
            &r.detail,
            &r.predicted_sql,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn render_summary(score: &DatasetScore) -> String {
    format!(
        "instances: {}\nEX: {:.1}\nEX@{}: {:.1}\navg wall (min): {:.2}\n",
        score.instances,
        score.ex * 100.0,
        score.k,
        score.ex_at_k * 100.0,
        score.avg_wall_minutes
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::SqliteAdapter;
    use std::sync::Arc;
    use std::time::Duration;

    pub(crate) fn memdb() -> (tempfile::TempDir, Arc<SqliteAdapter>) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sqlite");
        let conn = rusqlite::Connection::open(&path).unwrap();
        conn.execute_batch(
            "CREATE TABLE t(a INTEGER, b TEXT, c REAL);
             INSERT INTO t VALUES (1,'x',0.5),(2,'y ',1.25),(3,'z',NULL);",
        )
        .unwrap();
        drop(conn);
        let db = SqliteAdapter::open("t", &path, 2, Duration::from_secs(5)).unwrap();
        (dir, Arc::new(db))
    }

    #[test]
    fn order_by_detection() {
        assert!(has_top_level_order_by("SELECT a FROM t ORDER BY a"));
        assert!(has_top_level_order_by("select a from t order\n  by a desc limit 2"));
        assert!(!has_top_level_order_by("SELECT * FROM (SELECT a FROM t ORDER BY a) LIMIT 1"));
        assert!(!has_top_level_order_by("SELECT 'order by' FROM t"));
        assert!(!has_top_level_order_by("SELECT a FROM t -- ORDER BY a"));
        assert!(!has_top_level_order_by("SELECT a AS \"order\", b AS by FROM t"));
        assert!(!has_top_level_order_by("SELECT row_number() OVER (ORDER BY a) FROM t"));
    }

    #[test]
    fn union_matches_reversed_rows_without_order() {
        let (_d, db) = memdb();
        assert!(ex_match(db.as_ref(), "SELECT 2 UNION ALL SELECT 1", "SELECT 1 UNION SELECT 2", false).unwrap());
        assert!(!ex_match(db.as_ref(), "SELECT 2 UNION ALL SELECT 1", "SELECT 1 UNION SELECT 2", true).unwrap());
        assert!(!ex_match(db.as_ref(), "SELEC 1", "SELECT 1", false).unwrap());
        assert!(matches!(ex_match(db.as_ref(), "SELECT 1", "SELEC 1", false), Err(BenchError::GoldExecution { .. })));
    }

    #[test]
    fn cell_rules() {
        assert!(cells_match(&Value::Integer(3), &Value::Real(3.0000000001)));
        assert!(!cells_match(&Value::Real(1.0), &Value::Real(1.001)));
        assert!(cells_match(&Value::Text("ab  ".into()), &Value::Text("ab".into())));
        assert!(!cells_match(&Value::Text(" ab".into()), &Value::Text("ab".into())));
        assert!(!cells_match(&Value::Text("1".into()), &Value::Integer(1)));
        assert!(cells_match(&Value::Null, &Value::Null));
        assert_eq!(canonical_cell(&Value::Integer(3)), canonical_cell(&Value::Real(3.0)));
        assert_eq!(canonical_cell(&Value::Real(-0.0)), canonical_cell(&Value::Integer(0)));
    }

    #[test]
    fn matching_handles_tolerance_across_sort_order() {
        let r = |x: f64, s: &str| vec![Value::Real(x), Value::Text(s.into())];
        // 1.0000000 sorts before 0.99999999... only at full precision.
        let pred = vec![r(1.0, "b"), r(0.9999999999, "a")];
        let gold = vec![r(0.99999999995, "b"), r(1.0, "a")];
        assert!(results_match(&pred, &gold, false));
    }

    #[test]
    fn consensus_rules() {
        let run = |id, r: Option<&str>| ConsensusRun {
            run_id: id,
            final_sql: format!("q{id}"),
            result: r.map_or(CanonicalResult::Failed, |s| CanonicalResult::Rows(vec![s.into()])),
        };
        let pick = |runs| majority_consensus(&ConsensusInput { runs }).unwrap();
        let c = pick(vec![run(1, Some("A")), run(2, Some("A")), run(3, Some("B")), run(4, Some("A"))]);
        assert_eq!((c.run_id, c.votes), (1, 3));
        let c = pick(vec![run(3, Some("B")), run(4, Some("B")), run(1, Some("A")), run(2, Some("A"))]);
        assert_eq!(c.final_sql, "q1");
        let c = pick(vec![run(2, None), run(1, None)]);
        assert!(c.all_failed && c.run_id == 1);
        let c = pick(vec![run(1, None), run(2, None), run(3, Some("C"))]);
        assert_eq!(c.run_id, 3);
        assert!(majority_consensus(&ConsensusInput::default()).is_none());
    }

    #[test]
    fn ex_at_k_counts_any_run() {
        let (_d, db) = memdb();
        let handle: DbHandle = db;
        let inst = |id: &str, gold: &str| Instance {
            db: handle.clone(),
            gold: GoldRecord { instance_id: id.into(), gold_sql: gold.into(), order_sensitive: None },
        };
        let instances = vec![inst("i1", "SELECT count(*) FROM t"), inst("i2", "SELECT max(a) FROM t")];
        let pr = |id, sql: &str| PredictedRun { run_id: id, final_sql: Some(sql.into()), wall_millis: Some(60_000) };
        let runs = BTreeMap::from([
            ("i1".to_string(), vec![pr(1, "SELECT 1"), pr(2, "SELECT 2"), pr(3, "SELECT 3"), pr(4, "SELECT 4")]),
            ("i2".to_string(), vec![pr(1, "SELECT 9"), pr(2, "SELECT 9"), pr(3, "SELEC"), pr(4, "SELECT 8")]),
        ]);
        let s = score_dataset(&instances, &runs, 4).unwrap();
        assert_eq!(s.ex_at_k, 0.5);
        assert_eq!(s.ex, 0.0);
        assert_eq!(s.avg_wall_minutes, 1.0);
        let s1 = score_dataset(&instances, &runs, 1).unwrap();
        assert_eq!(s1.ex, s1.ex_at_k);
        assert!(matches!(score_dataset(&instances, &runs, 5), Err(BenchError::MissingRuns { .. })));
    }

    #[test]
    fn gold_file_parsing() {
        let g = parse_gold("{\"instance_id\":\"a\",\"gold_sql\":\"SELECT 1 ORDER BY 1\"}\n\n{\"instance_id\":\"b\",\"gold_sql\":\"SELECT 1 ORDER BY 1\",\"order_sensitive\":false}\n").unwrap();
        assert!(g[0].is_order_sensitive());
        assert!(!g[1].is_order_sensitive());
        assert!(parse_gold("{\"instance_id\":\"a\",\"gold_sql\":\"\"}").is_err());
    }
}
