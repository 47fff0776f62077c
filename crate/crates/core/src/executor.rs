//! SQL execution tool: runs agent SQL read-only, classifies the outcome and
//! renders a bounded CSV preview for the model.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ExecFormat, RunConfig};
use crate::par;
use crate::types::{ExecutionFeedback, ExecutionOutcome, SqlCandidate};

/// Ends a preview that was cut; it counts towards `max_chars`.
pub const TRUNCATION_MARKER: &str = "\n[truncated]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl Value {
    /// CSV cell text. NULL is the empty string; whole reals keep one decimal.
    pub fn render(&self) -> String {
        match self {
            Value::Null => String::new(),
            Value::Integer(i) => i.to_string(),
            Value::Real(f) if f.is_finite() && f.fract() == 0.0 && f.abs() < 1e15 => format!("{f:.1}"),
            Value::Real(f) => f.to_string(),
            Value::Text(s) => s.clone(),
            Value::Blob(b) => hex::encode(b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRows {
    pub columns: Vec<String>,
    /// At most the requested cap; `total_rows` counts everything produced.
    pub rows: Vec<Vec<Value>>,
    pub total_rows: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdapterError {
    #[error("{0}")]
    Compile(String),
    #[error("statement rejected: {0}")]
    Rejected(String),
    #[error("query exceeded the {0:?} execution timeout and was cancelled")]
    Timeout(Duration),
    #[error("database unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnInfo {
    pub name: String,
    pub data_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableInfo {
    pub name: String,
    pub columns: Vec<ColumnInfo>,
}

/// A dialect-specific database connection.
pub trait SqlAdapter: Send + Sync {
    fn db_id(&self) -> &str;
    /// Dialect notes handed to the generator and proposer prompts.
    fn dialect_rules(&self) -> &str;
    /// Runs one read-only statement, keeping at most `row_cap` rows.
    fn query(&self, sql: &str, row_cap: Option<usize>) -> Result<QueryRows, AdapterError>;
    fn introspect(&self) -> Result<Vec<TableInfo>, AdapterError>;
}

pub type DbHandle = Arc<dyn SqlAdapter>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("database `{db_id}` unavailable: {reason}")]
    DbUnavailable { db_id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationPolicy {
    pub format: ExecFormat,
    pub max_rows: usize,
    pub max_chars: usize,
}

impl TruncationPolicy {
    pub fn from_config(cfg: &RunConfig) -> Self {
        TruncationPolicy { format: cfg.exec_format, max_rows: cfg.exec_max_rows.max(1), max_chars: cfg.exec_max_length }
    }
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self::from_config(&RunConfig::default())
    }
}

/// Header plus up to `max_rows` rows as CSV, cut to `max_chars` characters.
pub fn render_preview(columns: &[String], rows: &[Vec<Value>], policy: &TruncationPolicy) -> String {
    let mut w = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Necessary)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    // Writing into a Vec cannot fail.
    let _ = w.write_record(columns);
    for row in rows.iter().take(policy.max_rows) {
        let _ = w.write_record(row.iter().map(Value::render));
    }
    let bytes = w.into_inner().unwrap_or_default();
    let mut text = String::from_utf8_lossy(&bytes).into_owned();
    if text.ends_with('\n') {
        text.pop();
    }
    truncate_chars(&text, policy.max_chars)
}

fn truncate_chars(text: &str, max_chars: usize) -> String {
    if text.chars().count() <= max_chars {
        return text.to_string();
    }
    let marker = TRUNCATION_MARKER.chars().count();
    if max_chars <= marker {
        return text.chars().take(max_chars).collect();
    }
    let kept: String = text.chars().take(max_chars - marker).collect();
    kept + TRUNCATION_MARKER
}

/// Runs one statement and classifies it. Only infrastructure failures are errors.
pub fn execute(db: &dyn SqlAdapter, sql: &str, policy: &TruncationPolicy) -> Result<ExecutionFeedback, ExecError> {
    let started = Instant::now();
    let result = db.query(sql, Some(policy.max_rows));
    let millis = started.elapsed().as_millis() as u64;
    let outcome = match result {
        Ok(rows) => {
            let preview = if rows.total_rows == 0 { String::new() } else { render_preview(&rows.columns, &rows.rows, policy) };
            ExecutionOutcome::Completed { row_count: rows.total_rows, preview }
        }
        Err(AdapterError::Unavailable(reason)) => {
            return Err(ExecError::DbUnavailable { db_id: db.db_id().to_string(), reason })
        }
        Err(e) => ExecutionOutcome::Failed(e.to_string()),
    };
    Ok(ExecutionFeedback::from_outcome(outcome, millis))
}

/// Executes candidates independently on up to `workers` threads, preserving order.
pub fn execute_batch(
    db: &DbHandle,
    candidates: Vec<SqlCandidate>,
    policy: &TruncationPolicy,
    workers: usize,
) -> Result<Vec<SqlCandidate>, ExecError> {
    if candidates.is_empty() {
        return Ok(candidates);
    }
    let results = par::map_bounded(candidates, workers.max(1), |mut c| {
        let res = execute(db.as_ref(), &c.sql, policy);
        let unavailable = res.as_ref().err().cloned();
        c.feedback = Some(match res {
            Ok(fb) => fb,
            Err(e) => ExecutionFeedback::compilation_error(e.to_string(), 0),
        });
        (c, unavailable)
    });
    if results.iter().all(|(_, e)| e.is_some()) {
        if let Some((_, Some(err))) = results.into_iter().next() {
            return Err(err);
        }
        unreachable!("batch is non-empty");
    }
    Ok(results.into_iter().map(|(c, _)| c).collect())
}

const SQLITE_RULES: &str = "\
- The engine is SQLite. Identifiers may be quoted with double quotes.
- Concatenate strings with ||, not CONCAT.
- Integer division truncates; multiply by 1.0 for a fractional result.
- Dates are stored as ISO-8601 text; use date(), strftime() and julianday().
- Only one SELECT (or WITH ... SELECT) statement per query; writes are refused.";

const DENIED_PREFIXES: &[&str] = &["ATTACH", "DETACH", "PRAGMA", "VACUUM", "REINDEX", "ANALYZE"];
const DESCRIPTIONS_TABLE: &str = "_descriptions";

/// Read-only SQLite adapter with a small connection pool.
pub struct SqliteAdapter {
    db_id: String,
    path: PathBuf,
    timeout: Duration,
    pool_size: usize,
    pool: Mutex<PoolState>,
    available: Condvar,
}

struct PoolState {
    idle: Vec<Connection>,
    open: usize,
}

impl std::fmt::Debug for SqliteAdapter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SqliteAdapter")
            .field("db_id", &self.db_id)
            .field("path", &self.path)
            .field("timeout", &self.timeout)
            .field("pool_size", &self.pool_size)
            .finish()
    }
}

impl SqliteAdapter {
    pub fn open(db_id: &str, path: &Path, pool_size: usize, timeout: Duration) -> Result<Self, AdapterError> {
        if !path.is_file() {
            return Err(AdapterError::Unavailable(format!("no database file at {}", path.display())));
        }
        let adapter = SqliteAdapter {
            db_id: db_id.to_string(),
            path: path.to_path_buf(),
            timeout,
            pool_size: pool_size.max(1),
            pool: Mutex::new(PoolState { idle: Vec::new(), open: 0 }),
            available: Condvar::new(),
        };
        // Fail fast on unreadable files.
        let conn = adapter.connect()?;
        adapter.release(conn);
        Ok(adapter)
    }

    fn connect(&self) -> Result<Connection, AdapterError> {
        let flags = OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX | OpenFlags::SQLITE_OPEN_URI;
        let conn = Connection::open_with_flags(&self.path, flags)
            .map_err(|e| AdapterError::Unavailable(format!("{}: {e}", self.path.display())))?;
        conn.query_row("SELECT count(*) FROM sqlite_master", [], |r| r.get::<_, i64>(0))
            .map_err(|e| AdapterError::Unavailable(format!("{}: {e}", self.path.display())))?;
        Ok(conn)
    }

    fn acquire(&self) -> Result<Connection, AdapterError> {
        let mut state = self.pool.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            if let Some(c) = state.idle.pop() {
                return Ok(c);
            }
            if state.open < self.pool_size {
                state.open += 1;
                drop(state);
                return self.connect().inspect_err(|_| {
                    let mut s = self.pool.lock().unwrap_or_else(|e| e.into_inner());
                    s.open -= 1;
                    self.available.notify_one();
                });
            }
            state = self.available.wait(state).unwrap_or_else(|e| e.into_inner());
        }
    }

    fn release(&self, conn: Connection) {
        let mut state = self.pool.lock().unwrap_or_else(|e| e.into_inner());
        if state.open == 0 {
            state.open = 1;
        }
        state.idle.push(conn);
        self.available.notify_one();
    }

    fn with_conn<T>(&self, f: impl FnOnce(&Connection) -> Result<T, AdapterError>) -> Result<T, AdapterError> {
        let conn = self.acquire()?;
        let out = f(&conn);
        self.release(conn);
        out
    }
}

fn leading_keyword(sql: &str) -> String {
    let mut rest = sql.trim_start();
    // skip leading comments
    loop {
        if let Some(r) = rest.strip_prefix("--") {
            rest = r.split_once('\n').map_or("", |(_, after)| after).trim_start();
        } else if let Some(r) = rest.strip_prefix("/*") {
            rest = r.split_once("*/").map_or("", |(_, after)| after).trim_start();
        } else {
            break;
        }
    }
    rest.chars().take_while(|c| c.is_ascii_alphabetic()).collect::<String>().to_ascii_uppercase()
}

fn sqlite_value(v: rusqlite::types::ValueRef<'_>) -> Value {
    use rusqlite::types::ValueRef;
    match v {
        ValueRef::Null => Value::Null,
        ValueRef::Integer(i) => Value::Integer(i),
        ValueRef::Real(f) => Value::Real(f),
        ValueRef::Text(t) => Value::Text(String::from_utf8_lossy(t).into_owned()),
        ValueRef::Blob(b) => Value::Blob(b.to_vec()),
    }
}

fn run_query(conn: &Connection, sql: &str, row_cap: Option<usize>, timeout: Duration) -> Result<QueryRows, AdapterError> {
    let trimmed = sql.trim().trim_end_matches(';').trim_end();
    if trimmed.is_empty() {
        return Err(AdapterError::Compile("empty statement".into()));
    }
    let keyword = leading_keyword(trimmed);
    if DENIED_PREFIXES.contains(&keyword.as_str()) {
        return Err(AdapterError::Rejected(format!("{keyword} statements are not allowed")));
    }
    let mut stmt = conn.prepare(trimmed).map_err(|e| match e {
        rusqlite::Error::MultipleStatement => AdapterError::Compile("only one statement per query is allowed".into()),
        other => AdapterError::Compile(engine_message(&other)),
    })?;
    if !stmt.readonly() {
        return Err(AdapterError::Rejected("only read-only queries are allowed".into()));
    }
    let columns: Vec<String> = stmt.column_names().into_iter().map(str::to_string).collect();
    let deadline = Instant::now() + timeout;
    conn.progress_handler(1_000, Some(move || Instant::now() > deadline))
        .map_err(|e| AdapterError::Unavailable(e.to_string()))?;
    let result = (|| {
        let mut rows = stmt.query([]).map_err(|e| AdapterError::Compile(engine_message(&e)))?;
        let mut kept = Vec::new();
        let mut total = 0u64;
        loop {
            let row = match rows.next() {
                Ok(Some(r)) => r,
                Ok(None) => break,
                Err(e) if is_interrupt(&e) => return Err(AdapterError::Timeout(timeout)),
                Err(e) => return Err(AdapterError::Compile(engine_message(&e))),
            };
            total += 1;
            if row_cap.is_none_or(|cap| kept.len() < cap) {
                kept.push((0..columns.len()).map(|i| row.get_ref(i).map(sqlite_value).unwrap_or(Value::Null)).collect());
            }
        }
        Ok(QueryRows { columns: columns.clone(), rows: kept, total_rows: total })
    })();
    let _ = conn.progress_handler(0, None::<fn() -> bool>);
    result
}

fn is_interrupt(e: &rusqlite::Error) -> bool {
    matches!(e, rusqlite::Error::SqliteFailure(f, _) if f.code == rusqlite::ErrorCode::OperationInterrupted)
}

fn engine_message(e: &rusqlite::Error) -> String {
    match e {
        rusqlite::Error::SqliteFailure(_, Some(msg)) => msg.clone(),
        rusqlite::Error::SqlInputError { msg, .. } => msg.clone(),
        other => other.to_string(),
    }
}

impl SqlAdapter for SqliteAdapter {
    fn db_id(&self) -> &str {
        &self.db_id
    }

    fn dialect_rules(&self) -> &str {
        SQLITE_RULES
    }

    fn query(&self, sql: &str, row_cap: Option<usize>) -> Result<QueryRows, AdapterError> {
        self.with_conn(|conn| run_query(conn, sql, row_cap, self.timeout))
    }

    fn introspect(&self) -> Result<Vec<TableInfo>, AdapterError> {
        self.with_conn(|conn| {
            let err = |e: rusqlite::Error| AdapterError::Unavailable(e.to_string());
            let mut stmt = conn
                .prepare("SELECT name FROM sqlite_master WHERE type IN ('table','view') AND name NOT LIKE 'sqlite_%' ORDER BY rowid")
                .map_err(err)?;
            let names: Vec<String> =
                stmt.query_map([], |r| r.get(0)).map_err(err)?.collect::<Result<_, _>>().map_err(err)?;
            let mut descriptions: HashMap<(String, String), String> = HashMap::new();
            if names.iter().any(|n| n == DESCRIPTIONS_TABLE) {
                let mut d = conn
                    .prepare("SELECT table_name, column_name, description FROM _descriptions")
                    .map_err(err)?;
                let rows = d
                    .query_map([], |r| Ok(((r.get::<_, String>(0)?, r.get::<_, String>(1)?), r.get::<_, String>(2)?)))
                    .map_err(err)?;
                for row in rows {
                    let ((t, c), text) = row.map_err(err)?;
                    descriptions.insert((t.to_ascii_lowercase(), c.to_ascii_lowercase()), text);
                }
            }
            let mut tables = Vec::new();
            for name in names.into_iter().filter(|n| n != DESCRIPTIONS_TABLE) {
                let mut info = conn.prepare("SELECT name, type FROM pragma_table_info(?1) ORDER BY cid").map_err(err)?;
                let columns = info
                    .query_map([&name], |r| Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?)))
                    .map_err(err)?
                    .map(|row| {
                        row.map(|(col, ty)| ColumnInfo {
                            description: descriptions
                                .get(&(name.to_ascii_lowercase(), col.to_ascii_lowercase()))
                                .cloned(),
                            name: col,
                            data_type: ty,
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(err)?;
                tables.push(TableInfo { name, columns });
            }
            Ok(tables)
        })
    }
}

/// Resolves `db_id` to `<fixtures_dir>/<db_id>.sqlite` and caches the handles.
pub struct DbCatalog {
    dir: PathBuf,
    pool_size: usize,
    timeout: Duration,
    handles: Mutex<HashMap<String, DbHandle>>,
}

impl std::fmt::Debug for DbCatalog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DbCatalog").field("dir", &self.dir).field("pool_size", &self.pool_size).finish()
    }
}

impl DbCatalog {
    pub fn new(dir: impl Into<PathBuf>, cfg: &RunConfig) -> Self {
        DbCatalog {
            dir: dir.into(),
            pool_size: cfg.num_workers.max(1),
            timeout: cfg.exec_timeout(),
            handles: Mutex::new(HashMap::new()),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Registers a handle directly, e.g. a non-SQLite adapter.
    pub fn insert(&self, handle: DbHandle) {
        let mut handles = self.handles.lock().unwrap_or_else(|e| e.into_inner());
        handles.insert(handle.db_id().to_string(), handle);
    }

    pub fn get(&self, db_id: &str) -> Result<DbHandle, ExecError> {
        let mut handles = self.handles.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(h) = handles.get(db_id) {
            return Ok(h.clone());
        }
        if db_id.is_empty() || db_id.contains(['/', '\\']) || db_id.starts_with('.') {
            return Err(ExecError::DbUnavailable { db_id: db_id.into(), reason: "invalid database id".into() });
        }
        let path = self.dir.join(format!("{db_id}.sqlite"));
        let adapter = SqliteAdapter::open(db_id, &path, self.pool_size, self.timeout).map_err(|e| {
            ExecError::DbUnavailable { db_id: db_id.into(), reason: e.to_string() }
        })?;
        let handle: DbHandle = Arc::new(adapter);
        handles.insert(db_id.to_string(), handle.clone());
        Ok(handle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::FeedbackKind;

    fn fixture() -> (tempfile::TempDir, DbHandle) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sqlite");
        let conn = Connection::open(&path).unwrap();
        conn.execute_batch(
            "CREATE TABLE items(id INTEGER PRIMARY KEY, name TEXT, price REAL, note TEXT);
             WITH RECURSIVE n(i) AS (SELECT 1 UNION ALL SELECT i+1 FROM n WHERE i < 10)
             INSERT INTO items SELECT i, 'item ' || i, i * 1.5, CASE WHEN i % 2 = 0 THEN NULL ELSE 'a,b' END FROM n;
             CREATE TABLE _descriptions(table_name TEXT, column_name TEXT, description TEXT);
             INSERT INTO _descriptions VALUES ('items', 'price', 'unit price in euros');",
        )
        .unwrap();
        drop(conn);
        let handle: DbHandle = Arc::new(SqliteAdapter::open("t", &path, 2, Duration::from_secs(5)).unwrap());
        (dir, handle)
    }

    #[test]
    fn three_kinds() {
        let (_d, db) = fixture();
        let p = TruncationPolicy::default();
        assert_eq!(execute(db.as_ref(), "SELEC 1", &p).unwrap().kind, FeedbackKind::CompilationError);
        assert_eq!(execute(db.as_ref(), "SELECT 1 WHERE 1=0", &p).unwrap().kind, FeedbackKind::NullError);
        let ok = execute(db.as_ref(), "SELECT id, name FROM items", &p).unwrap();
        assert_eq!(ok.kind, FeedbackKind::Success);
        assert_eq!(ok.row_count, 10);
        assert_eq!(ok.result_preview.as_deref(), Some("id,name\n1,item 1\n2,item 2\n3,item 3"));
    }

    #[test]
    fn csv_quoting_and_nulls() {
        let (_d, db) = fixture();
        let fb = execute(db.as_ref(), "SELECT price, note FROM items ORDER BY id LIMIT 2", &TruncationPolicy::default()).unwrap();
        assert_eq!(fb.result_preview.as_deref(), Some("price,note\n1.5,\"a,b\"\n3.0,"));
    }

    #[test]
    fn wide_preview_is_cut() {
        let (_d, db) = fixture();
        let p = TruncationPolicy::default();
        let fb = execute(db.as_ref(), "SELECT printf('%.300c', 'x') AS a, printf('%.300c', 'y') AS b FROM items", &p).unwrap();
        let preview = fb.result_preview.unwrap();
        assert!(preview.ends_with(TRUNCATION_MARKER));
        assert_eq!(preview.chars().count(), 500);
        assert_eq!(truncate_chars("abcdef", 3), "abc");
        assert_eq!(truncate_chars("abc", 3), "abc");
    }

    #[test]
    fn mutations_and_multi_statements_rejected() {
        let (_d, db) = fixture();
        let p = TruncationPolicy::default();
        for sql in [
            "DELETE FROM items",
            "INSERT INTO items(id) VALUES (99)",
            "DROP TABLE items",
            "PRAGMA table_info(items)",
            "SELECT 1; SELECT 2",
            "ATTACH 'x.db' AS x",
        ] {
            let fb = execute(db.as_ref(), sql, &p).unwrap();
            assert_eq!(fb.kind, FeedbackKind::CompilationError, "{sql}");
        }
        assert_eq!(execute(db.as_ref(), "SELECT count(*) FROM items", &p).unwrap().row_count, 1);
        assert_eq!(execute(db.as_ref(), "SELECT 1;", &p).unwrap().kind, FeedbackKind::Success);
    }

    #[test]
    fn timeout_is_compilation_kind() {
        let (d, _) = fixture();
        let db = SqliteAdapter::open("t", &d.path().join("t.sqlite"), 1, Duration::from_millis(50)).unwrap();
        let sql = "WITH RECURSIVE n(i) AS (SELECT 1 UNION ALL SELECT i+1 FROM n) SELECT count(*) FROM n";
        let fb = execute(&db, sql, &TruncationPolicy::default()).unwrap();
        assert_eq!(fb.kind, FeedbackKind::CompilationError);
        assert!(fb.message.contains("timeout"), "{}", fb.message);
    }

    #[test]
    fn batch_preserves_order() {
        let (_d, db) = fixture();
        let cands: Vec<SqlCandidate> = ["SELECT 1", "SELEC 1", "SELECT 1 WHERE 0"]
            .iter()
            .map(|s| SqlCandidate::new(*s, "", false, "p1").unwrap())
            .collect();
        let out = execute_batch(&db, cands, &TruncationPolicy::default(), 3).unwrap();
        let kinds: Vec<_> = out.iter().map(|c| c.kind().unwrap()).collect();
        assert_eq!(kinds, [FeedbackKind::Success, FeedbackKind::CompilationError, FeedbackKind::NullError]);
    }

    #[test]
    fn introspection_skips_sidecar_and_reads_descriptions() {
        let (_d, db) = fixture();
        let tables = db.introspect().unwrap();
        assert_eq!(tables.len(), 1);
        assert_eq!(tables[0].columns[2].description.as_deref(), Some("unit price in euros"));
    }

    #[test]
    fn catalog_reports_missing_db() {
        let dir = tempfile::tempdir().unwrap();
        let cat = DbCatalog::new(dir.path(), &RunConfig::default());
        assert!(matches!(cat.get("nope"), Err(ExecError::DbUnavailable { .. })));
        assert!(cat.get("../etc").is_err());
    }

    #[test]
    fn real_rendering() {
        assert_eq!(Value::Real(2.0).render(), "2.0");
        assert_eq!(Value::Real(2.25).render(), "2.25");
        assert_eq!(Value::Blob(vec![0xab, 1]).render(), "ab01");
        assert_eq!(Value::Null.render(), "");
    }
}
