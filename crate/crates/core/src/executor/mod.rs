//! Read-only SQL execution with timeouts and row caps.
//!
//! Every backend returns canonical [`ResultTable`]s or an [`ExecError`]
//! carrying the database's own message, which the correction loop forwards
//! to the model verbatim.

#[cfg(feature = "postgres")]
mod postgres;
mod sqlite;
mod table;

use std::fmt;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[cfg(feature = "postgres")]
pub use self::postgres::PostgresBackend;
pub use self::sqlite::SqliteBackend;
pub use self::table::{canonical_decimal, canonicalize_table, Cell, ResultTable};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_MAX_ROWS: usize = 10_000;
pub const WRITE_REJECTED: &str = "write statements rejected";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecErrorKind {
    Syntax,
    MissingRelation,
    Timeout,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecError {
    pub kind: ExecErrorKind,
    pub message: String,
}

impl ExecError {
    pub fn new(kind: ExecErrorKind, message: impl Into<String>) -> Self {
        let mut message = message.into();
        if message.trim().is_empty() {
            message = format!("{kind:?} error");
        }
        Self { kind, message }
    }

    /// Classifies a raw database message.
    pub fn from_message(message: impl Into<String>) -> Self {
        let message = message.into();
        let lower = message.to_lowercase();
        let kind = if lower.contains("syntax error") || lower.contains("incomplete input") {
            ExecErrorKind::Syntax
        } else if lower.contains("no such table")
            || lower.contains("no such column")
            || lower.contains("does not exist")
            || lower.contains("ambiguous column")
        {
            ExecErrorKind::MissingRelation
        } else if lower.contains("interrupted") || lower.contains("statement timeout") {
            ExecErrorKind::Timeout
        } else {
            ExecErrorKind::Other
        };
        Self::new(kind, message)
    }
}

impl fmt::Display for ExecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for ExecError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub timeout: Duration,
    pub max_rows: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self { timeout: DEFAULT_TIMEOUT, max_rows: DEFAULT_MAX_ROWS }
    }
}

/// A database the executor can run statements against.
///
/// Implementations must execute statements read-only and must be safe to
/// share between threads.
pub trait SqlBackend: Send + Sync {
    fn run(&self, sql: &str, limits: &Limits) -> Result<ResultTable, ExecError>;

    fn ping(&self) -> Result<(), ExecError>;

    fn describe(&self) -> String;
}

#[derive(Clone)]
pub struct Executor {
    backend: Arc<dyn SqlBackend>,
    limits: Limits,
}

impl fmt::Debug for Executor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Executor").field("backend", &self.backend.describe()).field("limits", &self.limits).finish()
    }
}

impl Executor {
    pub fn new(backend: Arc<dyn SqlBackend>, limits: Limits) -> Self {
        Self { backend, limits }
    }

    /// Opens a backend from a connection string.
    ///
    /// * `postgres://…` / `postgresql://…`: PostgreSQL server (requires the `postgres` feature)
    /// * a path ending in `.sql`: SQL dump loaded into a private SQLite file
    /// * anything else (optionally prefixed `sqlite:`): an existing SQLite database file
    pub fn connect(conn: &str, limits: Limits, pool_size: usize) -> Result<Self, ExecError> {
        let backend: Arc<dyn SqlBackend> = if conn.starts_with("postgres://") || conn.starts_with("postgresql://") {
            connect_postgres(conn, pool_size)?
        } else {
            let path = conn.strip_prefix("sqlite:").unwrap_or(conn);
            let path = path.strip_prefix("//").unwrap_or(path);
            if path.ends_with(".sql") {
                Arc::new(SqliteBackend::from_dump(Path::new(path), pool_size)?)
            } else {
                Arc::new(SqliteBackend::open(Path::new(path), pool_size)?)
            }
        };
        Ok(Self::new(backend, limits))
    }

    pub fn limits(&self) -> Limits {
        self.limits
    }

    pub fn execute_sql(&self, sql: &str) -> Result<ResultTable, ExecError> {
        self.execute_with(sql, &self.limits)
    }

    pub fn execute_with(&self, sql: &str, limits: &Limits) -> Result<ResultTable, ExecError> {
        let statement = guard_read_only(sql)?;
        let table = self.backend.run(statement, limits)?;
        Ok(canonicalize_table(&table))
    }

    pub fn ping(&self) -> Result<(), ExecError> {
        self.backend.ping()
    }

    pub fn describe(&self) -> String {
        self.backend.describe()
    }
}

#[cfg(feature = "postgres")]
fn connect_postgres(conn: &str, pool_size: usize) -> Result<Arc<dyn SqlBackend>, ExecError> {
    Ok(Arc::new(PostgresBackend::connect(conn, pool_size)?))
}

#[cfg(not(feature = "postgres"))]
fn connect_postgres(_conn: &str, _pool_size: usize) -> Result<Arc<dyn SqlBackend>, ExecError> {
    Err(ExecError::new(ExecErrorKind::Other, "PostgreSQL support not compiled in; rebuild with --features postgres"))
}

/// Rejects anything that is not a single read-only query and returns the
/// statement with surrounding whitespace and a trailing `;` removed.
pub fn guard_read_only(sql: &str) -> Result<&str, ExecError> {
    let statement = sql.trim();
    let statement = statement.strip_suffix(';').unwrap_or(statement).trim_end();
    let body = skip_leading_comments(statement);
    if body.is_empty() {
        return Err(ExecError::new(ExecErrorKind::Syntax, "empty statement"));
    }
    let keyword: String = body.chars().take_while(|c| c.is_ascii_alphabetic()).collect::<String>().to_ascii_lowercase();
    match keyword.as_str() {
        "select" | "with" | "values" => Ok(statement),
        _ => Err(ExecError::new(ExecErrorKind::Other, WRITE_REJECTED)),
    }
}

fn skip_leading_comments(mut s: &str) -> &str {
    loop {
        s = s.trim_start();
        if let Some(rest) = s.strip_prefix("--") {
            s = rest.split_once('\n').map_or("", |(_, tail)| tail);
        } else if let Some(rest) = s.strip_prefix("/*") {
            s = rest.split_once("*/").map_or("", |(_, tail)| tail);
        } else if let Some(rest) = s.strip_prefix('(') {
            s = rest;
        } else {
            return s;
        }
    }
}

/// SHA-256 of a file, hex encoded. Used to prove a database file was not modified.
pub fn file_checksum(path: impl AsRef<Path>) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guard_accepts_queries() {
        assert_eq!(guard_read_only("  SELECT 1;  ").unwrap(), "SELECT 1");
        assert!(guard_read_only("with t as (select 1) select * from t").is_ok());
        assert!(guard_read_only("-- note\nselect 1").is_ok());
        assert!(guard_read_only("/* c */ (select 1) union (select 2)").is_ok());
    }

    #[test]
    fn guard_rejects_writes() {
        for sql in [
            "DELETE FROM gene",
            "drop table gene",
            "INSERT INTO gene VALUES (1)",
            "update gene set x = 1",
            "PRAGMA query_only = 0",
            "ATTACH 'x.db' AS x",
        ] {
            let err = guard_read_only(sql).unwrap_err();
            assert_eq!(err.kind, ExecErrorKind::Other);
            assert_eq!(err.message, WRITE_REJECTED);
        }
    }

    #[test]
    fn empty_statement_is_an_error() {
        assert!(guard_read_only("  ;").is_err());
        assert!(guard_read_only("-- only a comment").is_err());
    }

    #[test]
    fn message_classification() {
        assert_eq!(ExecError::from_message("no such table: nope").kind, ExecErrorKind::MissingRelation);
        assert_eq!(ExecError::from_message("near \"SELEC\": syntax error").kind, ExecErrorKind::Syntax);
        assert_eq!(ExecError::from_message("relation \"nope\" does not exist").kind, ExecErrorKind::MissingRelation);
        assert_eq!(ExecError::from_message("disk I/O error").kind, ExecErrorKind::Other);
    }
}
