//! Read-only SQL execution against a SQLite database.
//!
//! Any generated query that fails to execute is converted into an
//! abstention, and answered queries are scored by comparing their result
//! table with the gold query's.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use rusqlite::types::ValueRef;
use rusqlite::{ffi, Batch, Connection, OpenFlags};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GateDecision, GateStage, GenerationRecord};

pub const DEFAULT_TIMEOUT_MS: u64 = 5000;

/// Relative tolerance for comparing real-valued cells.
pub const REAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExecStatus {
    Ok,
    SyntaxError,
    SchemaError,
    RuntimeError,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
}

pub type Row = Vec<Cell>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub status: ExecStatus,
    /// Present iff `status` is `Ok`.
    pub rows: Option<Vec<Row>>,
    /// Engine message for failed queries.
    pub message: Option<String>,
    pub elapsed_ms: u64,
}

impl ExecutionOutcome {
    pub fn is_ok(&self) -> bool {
        self.status == ExecStatus::Ok
    }
}

/// A read-only connection with a per-query time budget.
pub struct Database {
    conn: Connection,
    path: PathBuf,
    timeout: Duration,
}

impl std::fmt::Debug for Database {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Database")
            .field("path", &self.path)
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl Database {
    pub fn open_read_only(path: impl AsRef<Path>, timeout_ms: u64) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let wrap = |source| Error::Database {
            path: path.clone(),
            source,
        };
        if !path.is_file() {
            return Err(wrap(rusqlite::Error::InvalidPath(path.clone())));
        }
        let conn = Connection::open_with_flags(
            &path,
            OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX | OpenFlags::SQLITE_OPEN_URI,
        )
        .map_err(wrap)?;
        conn.pragma_update(None, "query_only", true).map_err(wrap)?;
        // Forces a header read so a non-database file fails here, not per query.
        conn.query_row("SELECT count(*) FROM sqlite_master", [], |_| Ok(()))
            .map_err(wrap)?;
        Ok(Self {
            conn,
            path,
            timeout: Duration::from_millis(timeout_ms.max(1)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn timeout_ms(&self) -> u64 {
        self.timeout.as_millis() as u64
    }

    /// Path and budget, for opening one connection per worker.
    fn handle(&self) -> (PathBuf, u64) {
        (self.path.clone(), self.timeout_ms())
    }

    pub fn execute(&self, sql: &str) -> ExecutionOutcome {
        // SQLite accepts an empty statement and returns nothing; that is not an answer.
        if sql.trim().trim_end_matches(';').trim().is_empty() {
            return ExecutionOutcome {
                status: ExecStatus::SyntaxError,
                rows: None,
                message: Some("empty query".into()),
                elapsed_ms: 0,
            };
        }
        let start = Instant::now();
        let deadline = start + self.timeout;
        self.conn
            .progress_handler(1000, Some(move || Instant::now() >= deadline));
        let result = run_query(&self.conn, sql);
        self.conn.progress_handler(0, None::<fn() -> bool>);
        let elapsed_ms = start.elapsed().as_millis() as u64;
        match result {
            Ok(rows) => ExecutionOutcome {
                status: ExecStatus::Ok,
                rows: Some(rows),
                message: None,
                elapsed_ms,
            },
            Err(err) => ExecutionOutcome {
                status: classify_error(&err),
                rows: None,
                message: Some(err.to_string()),
                elapsed_ms,
            },
        }
    }
}

fn run_query(conn: &Connection, sql: &str) -> rusqlite::Result<Vec<Row>> {
    let mut batch = Batch::new(conn, sql);
    let mut stmt = match batch.next()? {
        Some(stmt) => stmt,
        None => return Err(rusqlite::Error::MultipleStatement),
    };
    if batch.next()?.is_some() {
        return Err(rusqlite::Error::MultipleStatement);
    }
    let width = stmt.column_count();
    let mut rows = stmt.query([])?;
    let mut out = Vec::new();
    while let Some(row) = rows.next()? {
        let mut cells = Vec::with_capacity(width);
        for i in 0..width {
            cells.push(match row.get_ref(i)? {
                ValueRef::Null => Cell::Null,
                ValueRef::Integer(v) => Cell::Integer(v),
                ValueRef::Real(v) => Cell::Real(v),
                ValueRef::Text(t) => Cell::Text(String::from_utf8_lossy(t).into_owned()),
                ValueRef::Blob(b) => Cell::Text(String::from_utf8_lossy(b).into_owned()),
            });
        }
        out.push(cells);
    }
    Ok(out)
}

/// Map an engine error onto a status. Only affects reporting; every non-OK
/// status gates the same way.
pub fn classify_error(err: &rusqlite::Error) -> ExecStatus {
    let (code, msg) = match err {
        rusqlite::Error::SqliteFailure(code, msg) => (code.code, msg.as_deref().unwrap_or("")),
        rusqlite::Error::SqlInputError { error, msg, .. } => (error.code, msg.as_str()),
        rusqlite::Error::MultipleStatement => return ExecStatus::SyntaxError,
        _ => return ExecStatus::RuntimeError,
    };
    if code == ffi::ErrorCode::OperationInterrupted {
        return ExecStatus::Timeout;
    }
    let msg = msg.to_ascii_lowercase();
    if msg.contains("syntax error") || msg.contains("incomplete input") || msg.contains("unrecognized token") {
        ExecStatus::SyntaxError
    } else if msg.contains("no such table")
        || msg.contains("no such column")
        || msg.contains("ambiguous column")
        || msg.contains("no such function")
    {
        ExecStatus::SchemaError
    } else {
        ExecStatus::RuntimeError
    }
}

pub fn execute_sql(sql: &str, db: &Database) -> ExecutionOutcome {
    db.execute(sql)
}

/// True when the outermost query ends with an ORDER BY clause.
///
/// Lexical: string literals, quoted identifiers and comments are skipped,
/// and only keywords at parenthesis depth zero count.
pub fn has_top_level_order_by(sql: &str) -> bool {
    let bytes = sql.as_bytes();
    let mut depth = 0i32;
    let mut i = 0;
    let mut prev_word: Option<String> = None;
    while i < bytes.len() {
        let b = bytes[i];
        match b {
            b'\'' | b'"' | b'`' => {
                let close = b;
                i += 1;
                while i < bytes.len() {
                    if bytes[i] == close {
                        if i + 1 < bytes.len() && bytes[i + 1] == close {
                            i += 2;
                            continue;
                        }
                        break;
                    }
                    i += 1;
                }
                i += 1;
                prev_word = None;
            }
            b'[' => {
                while i < bytes.len() && bytes[i] != b']' {
                    i += 1;
                }
                i += 1;
                prev_word = None;
            }
            b'-' if bytes.get(i + 1) == Some(&b'-') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            b'/' if bytes.get(i + 1) == Some(&b'*') => {
                i += 2;
                while i + 1 < bytes.len() && !(bytes[i] == b'*' && bytes[i + 1] == b'/') {
                    i += 1;
                }
                i += 2;
            }
            b'(' => {
                depth += 1;
                i += 1;
                prev_word = None;
            }
            b')' => {
                depth -= 1;
                i += 1;
                prev_word = None;
            }
            c if c.is_ascii_alphanumeric() || c == b'_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                let word = sql[start..i].to_ascii_uppercase();
                if depth == 0 && word == "BY" && prev_word.as_deref() == Some("ORDER") {
                    return true;
                }
                prev_word = Some(word);
            }
            c if c.is_ascii_whitespace() => i += 1,
            _ => {
                i += 1;
                prev_word = None;
            }
        }
    }
    false
}

fn cell_rank(cell: &Cell) -> u8 {
    match cell {
        Cell::Null => 0,
        Cell::Integer(_) | Cell::Real(_) => 1,
        Cell::Text(_) => 2,
    }
}

fn as_real(cell: &Cell) -> Option<f64> {
    match cell {
        Cell::Integer(v) => Some(*v as f64),
        Cell::Real(v) => Some(*v),
        _ => None,
    }
}

fn cell_order(a: &Cell, b: &Cell) -> Ordering {
    match (a, b) {
        (Cell::Integer(x), Cell::Integer(y)) => x.cmp(y),
        (Cell::Text(x), Cell::Text(y)) => x.cmp(y),
        _ => match (as_real(a), as_real(b)) {
            (Some(x), Some(y)) => x.total_cmp(&y),
            _ => cell_rank(a).cmp(&cell_rank(b)),
        },
    }
}

fn row_order(a: &Row, b: &Row) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| cell_order(x, y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

/// Cell equality for result matching: NULL equals NULL, integers and text
/// compare exactly, anything involving a real compares with relative tolerance.
pub fn cells_match(pred: &Cell, gold: &Cell) -> bool {
    match (pred, gold) {
        (Cell::Null, Cell::Null) => true,
        (Cell::Integer(a), Cell::Integer(b)) => a == b,
        (Cell::Text(a), Cell::Text(b)) => a == b,
        _ => match (as_real(pred), as_real(gold)) {
            (Some(a), Some(b)) => (a - b).abs() <= REAL_TOLERANCE * b.abs().max(1.0),
            _ => false,
        },
    }
}

fn rows_match(pred: &Row, gold: &Row) -> bool {
    pred.len() == gold.len() && pred.iter().zip(gold).all(|(a, b)| cells_match(a, b))
}

/// Compare two result tables, as a sequence when `ordered`, otherwise as
/// multisets of rows.
pub fn results_match(pred: &[Row], gold: &[Row], ordered: bool) -> bool {
    if pred.len() != gold.len() {
        return false;
    }
    if ordered {
        return pred.iter().zip(gold).all(|(a, b)| rows_match(a, b));
    }
    let mut p: Vec<&Row> = pred.iter().collect();
    let mut g: Vec<&Row> = gold.iter().collect();
    p.sort_by(|a, b| row_order(a, b));
    g.sort_by(|a, b| row_order(a, b));
    p.iter().zip(&g).all(|(a, b)| rows_match(a, b))
}

/// Acc(x): whether the predicted query reproduces the gold query's result.
pub fn execution_accuracy(id: &str, pred_sql: &str, gold_sql: &str, db: &Database) -> Result<bool> {
    let gold = db.execute(gold_sql);
    let gold_rows = match gold.rows {
        Some(rows) => rows,
        None => {
            return Err(Error::GoldExecution {
                id: id.to_owned(),
                status: gold.status,
                message: gold.message.unwrap_or_default(),
            })
        }
    };
    let pred = db.execute(pred_sql);
    Ok(match pred.rows {
        Some(rows) => results_match(&rows, &gold_rows, has_top_level_order_by(pred_sql)),
        None => false,
    })
}

/// Abstain on every passing decision whose SQL fails to execute.
///
/// Rank-gated records are never executed. Output follows the order of
/// `decisions`; execution runs on a pool of read-only connections.
pub fn grammatical_error_filter(
    decisions: &[GateDecision],
    records: &[GenerationRecord],
    db: &Database,
) -> Result<Vec<GateDecision>> {
    let sql_by_id: HashMap<&str, &str> = records.iter().map(|r| (r.id(), r.sql())).collect();
    let mut jobs = Vec::with_capacity(decisions.len());
    for d in decisions {
        let sql = *sql_by_id
            .get(d.id.as_str())
            .ok_or_else(|| Error::MissingJoin(d.id.clone()))?;
        jobs.push((d, sql));
    }

    let (path, timeout_ms) = db.handle();
    jobs.par_iter()
        .map_init(
            || Database::open_read_only(&path, timeout_ms),
            |conn, (decision, sql)| {
                if !decision.answer() {
                    return Ok((*decision).clone());
                }
                let conn = conn.as_ref().map_err(|e| Error::Inconsistent(e.to_string()))?;
                let outcome = conn.execute(sql);
                if outcome.is_ok() {
                    Ok((*decision).clone())
                } else {
                    tracing::debug!(id = %decision.id, status = ?outcome.status, "execution gate abstains");
                    Ok(GateDecision::new(decision.id.clone(), GateStage::ExecutionGate))
                }
            },
        )
        .collect()
}

/// Run every record's query once and keep the outcome, keyed by id.
pub fn execute_all(records: &[GenerationRecord], db: &Database) -> Result<HashMap<String, ExecutionOutcome>> {
    let (path, timeout_ms) = db.handle();
    records
        .par_iter()
        .map_init(
            || Database::open_read_only(&path, timeout_ms),
            |conn, record| {
                let conn = conn.as_ref().map_err(|e| Error::Inconsistent(e.to_string()))?;
                Ok((record.id().to_owned(), conn.execute(record.sql())))
            },
        )
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScoredToken;

    fn fixture() -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.db");
        let conn = Connection::open(&path).unwrap();
        conn.execute_batch(
            "CREATE TABLE t (a INTEGER, b TEXT, c REAL);
             INSERT INTO t VALUES (3, 'x', 1.5), (1, 'y', NULL), (2, 'z', 0.1);",
        )
        .unwrap();
        (dir, path)
    }

    fn rec(id: &str, sql: &str) -> GenerationRecord {
        GenerationRecord::new(id, "q", sql, vec![ScoredToken::new(sql, -0.1).unwrap()]).unwrap()
    }

    #[test]
    fn execute_statuses() {
        let (_dir, path) = fixture();
        let db = Database::open_read_only(&path, DEFAULT_TIMEOUT_MS).unwrap();
        assert_eq!(db.execute("SELEC * FROM t").status, ExecStatus::SyntaxError);
        let one = db.execute("SELECT 1");
        assert_eq!(one.rows, Some(vec![vec![Cell::Integer(1)]]));
        assert_eq!(db.execute("SELECT nope FROM t").status, ExecStatus::SchemaError);
        assert_eq!(db.execute("SELECT * FROM missing").status, ExecStatus::SchemaError);
        assert_eq!(db.execute("SELECT a FROM t WHERE").status, ExecStatus::SyntaxError);
        assert_eq!(db.execute("SELECT 1; SELECT 2").status, ExecStatus::SyntaxError);
        let write = db.execute("DELETE FROM t");
        assert_eq!(write.status, ExecStatus::RuntimeError);
        assert_eq!(db.execute("SELECT count(*) FROM t").rows, Some(vec![vec![Cell::Integer(3)]]));
    }

    #[test]
    fn timeout_interrupts() {
        let (_dir, path) = fixture();
        let db = Database::open_read_only(&path, 50).unwrap();
        let slow = "WITH RECURSIVE n(i) AS (SELECT 1 UNION ALL SELECT i + 1 FROM n) SELECT count(*) FROM n";
        let out = db.execute(slow);
        assert_eq!(out.status, ExecStatus::Timeout);
        assert!(out.rows.is_none());
        // the connection stays usable afterwards
        assert!(db.execute("SELECT 1").is_ok());
    }

    #[test]
    fn open_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Database::open_read_only(dir.path().join("absent.db"), 100).is_err());
        let junk = dir.path().join("junk.db");
        std::fs::write(&junk, b"definitely not sqlite, just some bytes padding it out").unwrap();
        assert!(Database::open_read_only(&junk, 100).is_err());
    }

    #[test]
    fn order_by_detection() {
        assert!(has_top_level_order_by("SELECT a FROM t ORDER BY a"));
        assert!(has_top_level_order_by("select a from t order\n  by a desc limit 2"));
        assert!(!has_top_level_order_by("SELECT a FROM t"));
        assert!(!has_top_level_order_by("SELECT a FROM (SELECT a FROM t ORDER BY a)"));
        assert!(!has_top_level_order_by("SELECT 'ORDER BY' FROM t"));
        assert!(!has_top_level_order_by("SELECT a FROM t -- ORDER BY a"));
        assert!(!has_top_level_order_by("SELECT \"order\" by_x FROM t"));
        assert!(has_top_level_order_by("SELECT a FROM (SELECT a FROM t) ORDER BY a"));
    }

    #[test]
    fn accuracy_examples() {
        let (_dir, path) = fixture();
        let db = Database::open_read_only(&path, DEFAULT_TIMEOUT_MS).unwrap();
        let gold = "SELECT a FROM t ORDER BY a";
        assert!(execution_accuracy("q", gold, gold, &db).unwrap());
        assert!(execution_accuracy("q", "SELECT a FROM t", gold, &db).unwrap());
        // predicted ordering must hold when the prediction itself orders
        assert!(!execution_accuracy("q", "SELECT a FROM t ORDER BY a DESC", gold, &db).unwrap());
        assert!(!execution_accuracy("q", "SELECT a FROM t WHERE a < 3", "SELECT a FROM t WHERE a <> 2", &db).unwrap());
        assert!(!execution_accuracy("q", "SELEC a", gold, &db).unwrap());
        assert!(matches!(execution_accuracy("q", gold, "SELECT nope FROM t", &db), Err(Error::GoldExecution { .. })));
        // NULL matches NULL, reals within tolerance
        assert!(execution_accuracy("q", "SELECT c FROM t", "SELECT c + 1e-9 FROM t", &db).unwrap());
        assert!(!execution_accuracy("q", "SELECT c FROM t", "SELECT c + 1e-3 FROM t", &db).unwrap());
    }

    #[test]
    fn multiset_respects_duplicates() {
        let one = vec![Cell::Integer(1)];
        let two = vec![Cell::Integer(2)];
        assert!(results_match(&[one.clone(), two.clone()], &[two.clone(), one.clone()], false));
        assert!(!results_match(&[one.clone(), one.clone()], &[one.clone(), two.clone()], false));
        assert!(!results_match(&[one.clone(), two.clone()], &[two, one], true));
        assert!(cells_match(&Cell::Integer(2), &Cell::Real(2.0)));
        assert!(!cells_match(&Cell::Text("1".into()), &Cell::Integer(1)));
        assert!(!cells_match(&Cell::Null, &Cell::Integer(0)));
    }

    #[test]
    fn filter_stage_precedence() {
        let (_dir, path) = fixture();
        let db = Database::open_read_only(&path, DEFAULT_TIMEOUT_MS).unwrap();
        let records = vec![rec("ok", "SELECT a FROM t"), rec("bad", "SELEC a FROM t"), rec("gated", "SELEC x")];
        let decisions = vec![
            GateDecision::pass("ok"),
            GateDecision::pass("bad"),
            GateDecision::new("gated", GateStage::RankGate),
        ];
        let out = grammatical_error_filter(&decisions, &records, &db).unwrap();
        let stages: Vec<GateStage> = out.iter().map(|d| d.stage).collect();
        assert_eq!(stages, [GateStage::Pass, GateStage::ExecutionGate, GateStage::RankGate]);
        assert_eq!(grammatical_error_filter(&out, &records, &db).unwrap(), out);

        let orphan = vec![GateDecision::pass("q9")];
        assert!(matches!(grammatical_error_filter(&orphan, &records, &db), Err(Error::MissingJoin(id)) if id == "q9"));
    }
}
