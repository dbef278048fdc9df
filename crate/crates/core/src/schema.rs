//! Relational schema model: loading, validation and rendering into the
//! human-readable block that is embedded in every generation prompt.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("failed to read schema file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed schema document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid schema: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    #[serde(rename = "type")]
    pub data_type: String,
    #[serde(rename = "pk", default)]
    pub is_primary_key: bool,
    #[serde(default)]
    pub comment: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignKey {
    pub column: String,
    pub ref_table: String,
    pub ref_column: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub columns: Vec<ColumnDef>,
    #[serde(default)]
    pub foreign_keys: Vec<ForeignKey>,
}

impl TableDef {
    pub fn column(&self, name: &str) -> Option<&ColumnDef> {
        self.columns.iter().find(|c| c.name == name)
    }

    fn foreign_key_for(&self, column: &str) -> Option<&ForeignKey> {
        self.foreign_keys.iter().find(|fk| fk.column == column)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaModel {
    #[serde(rename = "database")]
    pub database_name: String,
    #[serde(default)]
    pub readable_override: Option<String>,
    pub tables: Vec<TableDef>,
}

impl SchemaModel {
    pub fn from_json(text: &str) -> Result<Self, SchemaError> {
        let model: SchemaModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Checks every structural invariant; the error names the offending element.
    pub fn validate(&self) -> Result<(), SchemaError> {
        let invalid = |msg: String| Err(SchemaError::Validation(msg));
        if self.database_name.trim().is_empty() {
            return invalid("database name is empty".into());
        }
        if self.tables.is_empty() {
            return invalid("no tables".into());
        }
        let mut table_names = HashSet::new();
        for table in &self.tables {
            if table.name.trim().is_empty() {
                return invalid("table with empty name".into());
            }
            if !table_names.insert(table.name.as_str()) {
                return invalid(format!("duplicate table name `{}`", table.name));
            }
            if table.columns.is_empty() {
                return invalid(format!("table `{}` has no columns", table.name));
            }
            let mut column_names = HashSet::new();
            for column in &table.columns {
                if column.name.trim().is_empty() {
                    return invalid(format!("table `{}` has a column with empty name", table.name));
                }
                if !column_names.insert(column.name.as_str()) {
                    return invalid(format!("duplicate column `{}` in table `{}`", column.name, table.name));
                }
            }
        }
        for table in &self.tables {
            for fk in &table.foreign_keys {
                let label = format!("foreign key {}.{} -> {}.{}", table.name, fk.column, fk.ref_table, fk.ref_column);
                if table.column(&fk.column).is_none() {
                    return invalid(format!("{label}: local column `{}` does not exist", fk.column));
                }
                match self.table(&fk.ref_table) {
                    None => return invalid(format!("{label}: target table `{}` does not exist", fk.ref_table)),
                    Some(target) if target.column(&fk.ref_column).is_none() => {
                        return invalid(format!("{label}: target column `{}` does not exist", fk.ref_column))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }
}

pub fn load_schema(path: impl AsRef<Path>) -> Result<SchemaModel, SchemaError> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|source| SchemaError::Io { path: path.display().to_string(), source })?;
    SchemaModel::from_json(&text)
}

/// Renders the schema as prompt text.
///
/// A checked-in `readable_override` wins verbatim. Otherwise each table is
/// rendered as a `Table: <name>` header followed by one line per column:
/// `- <name> (<type>)[ PK][, FK -> table.column][ -- comment]`. Tables are
/// separated by a blank line and the output ends with a newline.
pub fn render_schema_prompt(schema: &SchemaModel) -> String {
    if let Some(text) = &schema.readable_override {
        return text.clone();
    }
    let mut out = String::new();
    for (i, table) in schema.tables.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "Table: {}", table.name);
        for column in &table.columns {
            let _ = write!(out, "- {} ({})", column.name, column.data_type);
            if column.is_primary_key {
                out.push_str(" PK");
            }
            if let Some(fk) = table.foreign_key_for(&column.name) {
                let _ = write!(out, ", FK -> {}.{}", fk.ref_table, fk.ref_column);
            }
            if let Some(comment) = column.comment.as_deref().filter(|c| !c.trim().is_empty()) {
                let _ = write!(out, " -- {}", comment.trim());
            }
            out.push('\n');
        }
    }
    out
}

/// Columns that look like identifiers: `id` or anything ending in `_id`,
/// compared case-insensitively. Names are returned lowercased.
pub fn identifier_columns<S: AsRef<str>>(columns: &[S]) -> BTreeSet<String> {
    columns.iter().map(AsRef::as_ref).filter(|name| is_identifier_column(name)).map(str::to_ascii_lowercase).collect()
}

pub fn is_identifier_column(name: &str) -> bool {
    let lower = name.to_ascii_lowercase();
    lower == "id" || lower.ends_with("_id")
}
