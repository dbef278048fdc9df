use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::Instant;

use rusqlite::types::ValueRef;
use rusqlite::{Batch, Connection, ErrorCode, OpenFlags};
use tempfile::TempPath;

use super::{Cell, ExecError, ExecErrorKind, Limits, ResultTable, SqlBackend, WRITE_REJECTED};

/// Number of virtual machine instructions between deadline checks.
const PROGRESS_INTERVAL: i32 = 1_000;

/// SQLite database opened read-only through a small connection pool.
pub struct SqliteBackend {
    path: PathBuf,
    pool: Mutex<Vec<Connection>>,
    available: Condvar,
    // Keeps a materialized dump alive for the lifetime of the backend.
    _materialized: Option<TempPath>,
}

impl SqliteBackend {
    pub fn open(path: &Path, pool_size: usize) -> Result<Self, ExecError> {
        if !path.is_file() {
            return Err(ExecError::new(
                ExecErrorKind::Other,
                format!("database file {} does not exist", path.display()),
            ));
        }
        Self::with_pool(path.to_path_buf(), pool_size, None)
    }

    /// Loads a SQL dump into a private temporary database file, then reopens
    /// it read-only.
    pub fn from_dump(dump: &Path, pool_size: usize) -> Result<Self, ExecError> {
        let script = std::fs::read_to_string(dump)
            .map_err(|e| ExecError::new(ExecErrorKind::Other, format!("cannot read {}: {e}", dump.display())))?;
        let file = tempfile::Builder::new()
            .prefix("carefulsql-")
            .suffix(".db")
            .tempfile()
            .map_err(|e| ExecError::new(ExecErrorKind::Other, e.to_string()))?;
        let temp_path = file.into_temp_path();
        {
            let conn = Connection::open(&temp_path).map_err(sqlite_error)?;
            conn.execute_batch(&script).map_err(sqlite_error)?;
        }
        let path = temp_path.to_path_buf();
        Self::with_pool(path, pool_size, Some(temp_path))
    }

    fn with_pool(path: PathBuf, pool_size: usize, materialized: Option<TempPath>) -> Result<Self, ExecError> {
        let connections = (0..pool_size.max(1)).map(|_| open_read_only(&path)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self { path, pool: Mutex::new(connections), available: Condvar::new(), _materialized: materialized })
    }

    pub fn database_path(&self) -> &Path {
        &self.path
    }

    fn with_connection<T>(&self, f: impl FnOnce(&Connection) -> T) -> T {
        let conn = {
            let mut pool = self.pool.lock().expect("connection pool poisoned");
            loop {
                if let Some(conn) = pool.pop() {
                    break conn;
                }
                pool = self.available.wait(pool).expect("connection pool poisoned");
            }
        };
        let result = f(&conn);
        self.pool.lock().expect("connection pool poisoned").push(conn);
        self.available.notify_one();
        result
    }
}

fn open_read_only(path: &Path) -> Result<Connection, ExecError> {
    let flags = OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX | OpenFlags::SQLITE_OPEN_URI;
    let conn = Connection::open_with_flags(path, flags).map_err(sqlite_error)?;
    conn.pragma_update(None, "query_only", true).map_err(sqlite_error)?;
    Ok(conn)
}

fn sqlite_error(err: rusqlite::Error) -> ExecError {
    if let rusqlite::Error::SqliteFailure(code, _) = &err {
        if code.code == ErrorCode::OperationInterrupted {
            return ExecError::new(ExecErrorKind::Timeout, "query interrupted: timeout exceeded");
        }
    }
    match err {
        rusqlite::Error::MultipleStatement => {
            ExecError::new(ExecErrorKind::Other, "multiple statements are not allowed")
        }
        other => ExecError::from_message(other.to_string()),
    }
}

fn to_cell(value: ValueRef<'_>) -> Cell {
    match value {
        ValueRef::Null => Cell::Null,
        ValueRef::Integer(i) => Cell::Int(i),
        ValueRef::Real(f) => Cell::decimal(f),
        ValueRef::Text(bytes) => Cell::Text(String::from_utf8_lossy(bytes).into_owned()),
        ValueRef::Blob(bytes) => Cell::Text(format!("x'{}'", hex::encode(bytes))),
    }
}

fn run_query(conn: &Connection, sql: &str, limits: &Limits) -> Result<ResultTable, ExecError> {
    let mut batch = Batch::new(conn, sql);
    let mut stmt =
        batch.next().map_err(sqlite_error)?.ok_or_else(|| ExecError::new(ExecErrorKind::Syntax, "empty statement"))?;
    if batch.next().map_err(sqlite_error)?.is_some() {
        return Err(sqlite_error(rusqlite::Error::MultipleStatement));
    }
    if !stmt.readonly() {
        return Err(ExecError::new(ExecErrorKind::Other, WRITE_REJECTED));
    }
    let columns: Vec<String> = stmt.column_names().into_iter().map(str::to_string).collect();
    let width = columns.len();
    let mut rows = stmt.query([]).map_err(sqlite_error)?;
    let mut out = Vec::new();
    let mut truncated = false;
    while let Some(row) = rows.next().map_err(sqlite_error)? {
        if out.len() == limits.max_rows {
            truncated = true;
            break;
        }
        let mut cells = Vec::with_capacity(width);
        for i in 0..width {
            cells.push(to_cell(row.get_ref(i).map_err(sqlite_error)?));
        }
        out.push(cells);
    }
    Ok(ResultTable { columns, rows: out, truncated })
}

impl SqlBackend for SqliteBackend {
    fn run(&self, sql: &str, limits: &Limits) -> Result<ResultTable, ExecError> {
        self.with_connection(|conn| {
            let deadline = Instant::now() + limits.timeout;
            conn.progress_handler(PROGRESS_INTERVAL, Some(move || Instant::now() > deadline));
            let result = run_query(conn, sql, limits);
            conn.progress_handler(0, None::<fn() -> bool>);
            result.map_err(|e| match e.kind {
                ExecErrorKind::Timeout => {
                    ExecError::new(ExecErrorKind::Timeout, format!("query exceeded the {:?} timeout", limits.timeout))
                }
                _ => e,
            })
        })
    }

    fn ping(&self) -> Result<(), ExecError> {
        self.with_connection(|conn| conn.query_row("SELECT 1", [], |_| Ok(())).map_err(sqlite_error))
    }

    fn describe(&self) -> String {
        format!("sqlite:{}", self.path.display())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::{file_checksum, Executor};
    use std::sync::Arc;
    use std::time::Duration;

    fn fixture() -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.db");
        let conn = Connection::open(&path).unwrap();
        conn.execute_batch(
            "CREATE TABLE gene (id INTEGER PRIMARY KEY, symbol TEXT, score REAL);
             INSERT INTO gene VALUES (1, 'TP53', 0.5), (2, 'EGFR', NULL), (3, 'KRAS', 2.25);",
        )
        .unwrap();
        (dir, path)
    }

    fn executor(path: &Path, limits: Limits) -> Executor {
        Executor::new(Arc::new(SqliteBackend::open(path, 2).unwrap()), limits)
    }

    #[test]
    fn constant_query() {
        let (_dir, path) = fixture();
        let table = executor(&path, Limits::default()).execute_sql("SELECT 1 AS x").unwrap();
        assert_eq!(table.columns, vec!["x"]);
        assert_eq!(table.rows, vec![vec![Cell::Int(1)]]);
        assert!(!table.truncated);
    }

    #[test]
    fn missing_relation_names_table() {
        let (_dir, path) = fixture();
        let err = executor(&path, Limits::default()).execute_sql("SELECT * FROM no_such_table").unwrap_err();
        assert_eq!(err.kind, ExecErrorKind::MissingRelation);
        assert!(err.message.contains("no_such_table"), "{}", err.message);
    }

    #[test]
    fn writes_rejected_and_file_untouched() {
        let (_dir, path) = fixture();
        let before = file_checksum(&path).unwrap();
        let exec = executor(&path, Limits::default());
        let err = exec.execute_sql("DELETE FROM gene").unwrap_err();
        assert_eq!(err.message, WRITE_REJECTED);
        // A write hidden behind a leading SELECT is caught at prepare time.
        assert!(exec.execute_sql("SELECT 1; DELETE FROM gene").is_err());
        let backend = SqliteBackend::open(&path, 1).unwrap();
        assert!(backend.run("DELETE FROM gene", &Limits::default()).is_err());
        assert_eq!(file_checksum(&path).unwrap(), before);
    }

    #[test]
    fn row_cap_marks_truncation() {
        let (_dir, path) = fixture();
        let limits = Limits { max_rows: 2, ..Limits::default() };
        let table = executor(&path, limits).execute_sql("SELECT symbol FROM gene").unwrap();
        assert_eq!(table.rows.len(), 2);
        assert!(table.truncated);
        let exact = Limits { max_rows: 3, ..Limits::default() };
        assert!(!executor(&path, exact).execute_sql("SELECT symbol FROM gene").unwrap().truncated);
    }

    #[test]
    fn runaway_query_times_out() {
        let (_dir, path) = fixture();
        let limits = Limits { timeout: Duration::from_millis(50), ..Limits::default() };
        let sql = "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c) \
                   SELECT count(*) FROM c";
        let err = executor(&path, limits).execute_sql(sql).unwrap_err();
        assert_eq!(err.kind, ExecErrorKind::Timeout);
    }

    #[test]
    fn typed_cells_and_lowercased_columns() {
        let (_dir, path) = fixture();
        let table = executor(&path, Limits::default())
            .execute_sql("SELECT Symbol AS Sym, score, 0.1 + 0.2 AS s FROM gene ORDER BY id")
            .unwrap();
        assert_eq!(table.columns, vec!["sym", "score", "s"]);
        assert_eq!(table.rows[0], vec![Cell::text("TP53"), Cell::decimal(0.5), Cell::decimal(0.3)]);
        assert_eq!(table.rows[1][1], Cell::Null);
    }

    #[test]
    fn syntax_error_kind() {
        let (_dir, path) = fixture();
        let err = executor(&path, Limits::default()).execute_sql("SELECT FROM WHERE").unwrap_err();
        assert_eq!(err.kind, ExecErrorKind::Syntax);
    }

    #[test]
    fn dump_is_materialized() {
        let dir = tempfile::tempdir().unwrap();
        let dump = dir.path().join("d.sql");
        std::fs::write(&dump, "CREATE TABLE t(a INTEGER); INSERT INTO t VALUES (4);").unwrap();
        let backend = SqliteBackend::from_dump(&dump, 1).unwrap();
        let table = backend.run("SELECT a FROM t", &Limits::default()).unwrap();
        assert_eq!(table.rows, vec![vec![Cell::Int(4)]]);
        assert!(backend.ping().is_ok());
    }

    #[test]
    fn missing_file_fails_to_open() {
        assert!(SqliteBackend::open(Path::new("/nonexistent/x.db"), 1).is_err());
    }
}
