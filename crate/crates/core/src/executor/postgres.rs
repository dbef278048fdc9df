use std::error::Error as _;
use std::sync::{Condvar, Mutex};

use fallible_iterator::FallibleIterator;
use postgres::types::{FromSql, Type};
use postgres::{Client, NoTls, Row};

use super::{Cell, ExecError, ExecErrorKind, Limits, ResultTable, SqlBackend};

/// PostgreSQL server reached over the wire protocol. Each statement runs in
/// its own `READ ONLY` transaction with a local `statement_timeout`, and the
/// transaction is always rolled back.
pub struct PostgresBackend {
    url: String,
    pool: Mutex<Vec<Client>>,
    available: Condvar,
}

impl PostgresBackend {
    pub fn connect(url: &str, pool_size: usize) -> Result<Self, ExecError> {
        let clients = (0..pool_size.max(1))
            .map(|_| Client::connect(url, NoTls).map_err(pg_error))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { url: redact(url), pool: Mutex::new(clients), available: Condvar::new() })
    }

    fn with_client<T>(&self, f: impl FnOnce(&mut Client) -> T) -> T {
        let mut client = {
            let mut pool = self.pool.lock().expect("connection pool poisoned");
            loop {
                if let Some(c) = pool.pop() {
                    break c;
                }
                pool = self.available.wait(pool).expect("connection pool poisoned");
            }
        };
        let result = f(&mut client);
        self.pool.lock().expect("connection pool poisoned").push(client);
        self.available.notify_one();
        result
    }
}

fn redact(url: &str) -> String {
    match (url.find("://"), url.rfind('@')) {
        (Some(scheme), Some(at)) if at > scheme => format!("{}://***{}", &url[..scheme], &url[at..]),
        _ => url.to_string(),
    }
}

fn pg_error(err: postgres::Error) -> ExecError {
    if let Some(db) = err.as_db_error() {
        let message = db.message().to_string();
        return match db.code().code() {
            "42601" => ExecError::new(ExecErrorKind::Syntax, message),
            "42P01" | "42703" | "42883" | "3F000" => ExecError::new(ExecErrorKind::MissingRelation, message),
            "57014" => ExecError::new(ExecErrorKind::Timeout, message),
            "25006" => ExecError::new(ExecErrorKind::Other, super::WRITE_REJECTED),
            _ => ExecError::new(ExecErrorKind::Other, message),
        };
    }
    let message = err.source().map_or_else(|| err.to_string(), |s| s.to_string());
    ExecError::new(ExecErrorKind::Other, message)
}

/// `NUMERIC` in binary wire format, rendered as plain decimal text.
struct PgNumeric(String);

impl<'a> FromSql<'a> for PgNumeric {
    fn from_sql(_: &Type, raw: &'a [u8]) -> Result<Self, Box<dyn std::error::Error + Sync + Send>> {
        decode_numeric(raw).map(PgNumeric).ok_or_else(|| "malformed numeric".into())
    }

    fn accepts(ty: &Type) -> bool {
        *ty == Type::NUMERIC
    }
}

fn decode_numeric(raw: &[u8]) -> Option<String> {
    let word = |i: usize| -> Option<u16> { Some(u16::from_be_bytes([*raw.get(2 * i)?, *raw.get(2 * i + 1)?])) };
    let ndigits = word(0)? as usize;
    let weight = word(1)? as i16 as i32;
    let sign = word(2)?;
    match sign {
        0xC000 => return Some("NaN".into()),
        0xD000 => return Some("inf".into()),
        0xF000 => return Some("-inf".into()),
        _ => {}
    }
    let digits = (0..ndigits).map(|i| word(4 + i)).collect::<Option<Vec<u16>>>()?;
    let mut int_part = String::new();
    let mut frac_part = String::new();
    for (i, group) in digits.iter().enumerate() {
        let exponent = weight - i as i32;
        if exponent >= 0 {
            if int_part.is_empty() {
                int_part = group.to_string();
            } else {
                int_part.push_str(&format!("{group:04}"));
            }
        } else {
            frac_part.push_str(&format!("{group:04}"));
        }
    }
    // Trailing zero groups omitted on the wire still count in the integer part.
    let last_exponent = weight - ndigits as i32 + 1;
    if !int_part.is_empty() && last_exponent > 0 {
        for _ in 0..last_exponent {
            int_part.push_str("0000");
        }
    }
    // Leading zero groups omitted between the point and the first digit group.
    if weight < -1 {
        frac_part.insert_str(0, &"0000".repeat((-weight - 1) as usize));
    }
    if int_part.is_empty() {
        int_part.push('0');
    }
    let frac = frac_part.trim_end_matches('0');
    let sign = if sign == 0x4000 { "-" } else { "" };
    Some(if frac.is_empty() { format!("{sign}{int_part}") } else { format!("{sign}{int_part}.{frac}") })
}

fn to_cell(row: &Row, idx: usize) -> Result<Cell, ExecError> {
    let ty = row.columns()[idx].type_().clone();
    let conv = |e: postgres::Error| pg_error(e);
    let cell = match ty {
        Type::BOOL => row.try_get::<_, Option<bool>>(idx).map_err(conv)?.map(Cell::Bool),
        Type::INT2 => row.try_get::<_, Option<i16>>(idx).map_err(conv)?.map(|v| Cell::Int(v.into())),
        Type::INT4 => row.try_get::<_, Option<i32>>(idx).map_err(conv)?.map(|v| Cell::Int(v.into())),
        Type::INT8 => row.try_get::<_, Option<i64>>(idx).map_err(conv)?.map(Cell::Int),
        Type::OID => row.try_get::<_, Option<u32>>(idx).map_err(conv)?.map(|v| Cell::Int(v.into())),
        Type::FLOAT4 => row.try_get::<_, Option<f32>>(idx).map_err(conv)?.map(|v| Cell::decimal(v.into())),
        Type::FLOAT8 => row.try_get::<_, Option<f64>>(idx).map_err(conv)?.map(Cell::decimal),
        Type::NUMERIC => row.try_get::<_, Option<PgNumeric>>(idx).map_err(conv)?.map(|n| match n.0.parse::<f64>() {
            Ok(v) if !n.0.contains('.') && v.abs() < 9.0e15 => Cell::Int(v as i64),
            Ok(v) => Cell::decimal(v),
            Err(_) => Cell::Decimal(n.0),
        }),
        Type::TEXT | Type::VARCHAR | Type::BPCHAR | Type::NAME | Type::UNKNOWN => {
            row.try_get::<_, Option<String>>(idx).map_err(conv)?.map(Cell::Text)
        }
        other => {
            return Err(ExecError::new(
                ExecErrorKind::Other,
                format!(
                    "unsupported result column type {} for column {}; cast it to text",
                    other.name(),
                    row.columns()[idx].name()
                ),
            ))
        }
    };
    Ok(cell.unwrap_or(Cell::Null))
}

impl SqlBackend for PostgresBackend {
    fn run(&self, sql: &str, limits: &Limits) -> Result<ResultTable, ExecError> {
        self.with_client(|client| {
            let mut tx = client.transaction().map_err(pg_error)?;
            tx.batch_execute(&format!(
                "SET TRANSACTION READ ONLY; SET LOCAL statement_timeout = {}",
                limits.timeout.as_millis().max(1)
            ))
            .map_err(pg_error)?;
            let stmt = tx.prepare(sql).map_err(pg_error)?;
            let columns: Vec<String> = stmt.columns().iter().map(|c| c.name().to_string()).collect();
            let mut iter =
                tx.query_raw(&stmt, std::iter::empty::<&(dyn postgres::types::ToSql + Sync)>()).map_err(pg_error)?;
            let mut rows = Vec::new();
            let mut truncated = false;
            while let Some(row) = iter.next().map_err(pg_error)? {
                if rows.len() == limits.max_rows {
                    truncated = true;
                    break;
                }
                rows.push((0..columns.len()).map(|i| to_cell(&row, i)).collect::<Result<_, _>>()?);
            }
            drop(iter);
            tx.rollback().map_err(pg_error)?;
            Ok(ResultTable { columns, rows, truncated })
        })
    }

    fn ping(&self) -> Result<(), ExecError> {
        self.with_client(|client| client.simple_query("SELECT 1").map(|_| ()).map_err(pg_error))
    }

    fn describe(&self) -> String {
        self.url.clone()
    }
}
