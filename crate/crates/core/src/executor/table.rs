use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

/// Significant digits kept when rendering floating point cells.
pub const DECIMAL_SIGNIFICANT_DIGITS: usize = 12;

/// A single canonical result cell.
///
/// Decimals are stored as their canonical text rendering so that two
/// executions of the same query always produce identical tables. In JSON
/// they are written as numbers; non-finite values fall back to strings.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cell {
    Null,
    Bool(bool),
    Int(i64),
    Decimal(String),
    Text(String),
}

impl Cell {
    pub fn decimal(value: f64) -> Self {
        Cell::Decimal(canonical_decimal(value))
    }

    pub fn text(value: impl Into<String>) -> Self {
        Cell::Text(value.into())
    }

    /// Numeric view used by tolerant comparison.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Int(i) => Some(*i as f64),
            Cell::Decimal(s) => s.parse().ok(),
            _ => None,
        }
    }

    pub fn canonical(&self) -> Cell {
        match self {
            Cell::Decimal(s) => match s.parse::<f64>() {
                Ok(v) => Cell::decimal(v),
                Err(_) => self.clone(),
            },
            other => other.clone(),
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Null => f.write_str("NULL"),
            Cell::Bool(b) => write!(f, "{b}"),
            Cell::Int(i) => write!(f, "{i}"),
            Cell::Decimal(s) | Cell::Text(s) => f.write_str(s),
        }
    }
}

/// Renders a float with 12 significant digits, trailing zeros trimmed.
///
/// Fixed notation is used for decimal exponents in `[-4, 12)`, scientific
/// otherwise. Fixed renderings always keep a fractional part (`3.0`) so the
/// text never collides with an integer cell.
pub fn canonical_decimal(value: f64) -> String {
    if value.is_nan() {
        return "NaN".into();
    }
    if value.is_infinite() {
        return if value > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if value == 0.0 {
        return "0.0".into();
    }
    let sci = format!("{:.*e}", DECIMAL_SIGNIFICANT_DIGITS - 1, value);
    let (mantissa, exponent) = sci.split_once('e').expect("exponent in scientific rendering");
    let exponent: i32 = exponent.parse().expect("integer exponent");
    if !(-4..DECIMAL_SIGNIFICANT_DIGITS as i32).contains(&exponent) {
        let mantissa = trim_fraction(mantissa);
        return format!("{mantissa}e{exponent}");
    }
    let precision = (DECIMAL_SIGNIFICANT_DIGITS as i32 - 1 - exponent).max(0) as usize;
    let fixed = format!("{value:.precision$}");
    let trimmed = trim_fraction(&fixed);
    if trimmed.contains('.') {
        trimmed.to_string()
    } else {
        format!("{trimmed}.0")
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

impl Serialize for Cell {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Cell::Null => serializer.serialize_none(),
            Cell::Bool(b) => serializer.serialize_bool(*b),
            Cell::Int(i) => serializer.serialize_i64(*i),
            Cell::Decimal(s) => match s.parse::<f64>() {
                Ok(v) if v.is_finite() => serializer.serialize_f64(v),
                _ => serializer.serialize_str(s),
            },
            Cell::Text(s) => serializer.serialize_str(s),
        }
    }
}

impl<'de> Deserialize<'de> for Cell {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct CellVisitor;

        impl<'de> Visitor<'de> for CellVisitor {
            type Value = Cell;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("null, boolean, number or string")
            }

            fn visit_unit<E: de::Error>(self) -> Result<Cell, E> {
                Ok(Cell::Null)
            }

            fn visit_none<E: de::Error>(self) -> Result<Cell, E> {
                Ok(Cell::Null)
            }

            fn visit_bool<E: de::Error>(self, v: bool) -> Result<Cell, E> {
                Ok(Cell::Bool(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Cell, E> {
                Ok(Cell::Int(v))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Cell, E> {
                Ok(i64::try_from(v).map(Cell::Int).unwrap_or_else(|_| Cell::decimal(v as f64)))
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Cell, E> {
                Ok(Cell::decimal(v))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Cell, E> {
                Ok(Cell::Text(v.to_string()))
            }

            fn visit_string<E: de::Error>(self, v: String) -> Result<Cell, E> {
                Ok(Cell::Text(v))
            }
        }

        deserializer.deserialize_any(CellVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ResultTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    #[serde(default)]
    pub truncated: bool,
}

impl ResultTable {
    pub fn new(columns: Vec<String>, rows: Vec<Vec<Cell>>) -> Self {
        Self { columns, rows, truncated: false }
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn is_well_formed(&self) -> bool {
        self.rows.iter().all(|r| r.len() == self.columns.len())
    }

    /// Copy containing at most `n` leading rows; marks truncation if any were dropped.
    pub fn head(&self, n: usize) -> ResultTable {
        ResultTable {
            columns: self.columns.clone(),
            rows: self.rows.iter().take(n).cloned().collect(),
            truncated: self.truncated || self.rows.len() > n,
        }
    }
}

/// Lowercases column names and re-renders decimal cells canonically.
/// Row order is preserved.
pub fn canonicalize_table(table: &ResultTable) -> ResultTable {
    ResultTable {
        columns: table.columns.iter().map(|c| c.to_lowercase()).collect(),
        rows: table.rows.iter().map(|row| row.iter().map(Cell::canonical).collect()).collect(),
        truncated: table.truncated,
    }
}
