//! Turning raw model output into a SQL candidate or an abstention, and the
//! string normalization used by exact-match scoring.

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

/// The literal phrase a model emits to decline a question.
pub const ABSTENTION_MARKER: &str = "unanswerable question";

const SQL_MARKER: &str = "[SQL]:";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "class", content = "text", rename_all = "snake_case")]
pub enum ModelOutputClass {
    Sql(String),
    Abstention,
    Unusable(String),
}

static FENCE: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?s)```(.*?)```").unwrap());

static SELECT_START: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?i)\bselect\s").unwrap());

// `with` alone is an ordinary English word; only a CTE header counts.
static WITH_START: Lazy<Regex> =
    Lazy::new(|| Regex::new(r#"(?i)\bwith\s+(recursive\s+)?[A-Za-z_"][\w"]*\s*(\([^)]*\)\s*)?as\s*\("#).unwrap());

/// Classifies model output.
///
/// The abstention marker wins whenever it appears outside a fenced code
/// block (or as the entire content of one). Otherwise a SQL candidate is
/// extracted with the first rule that yields nonempty text:
///
/// 1. the content of the first fenced code block;
/// 2. the text after the last `[SQL]:` marker;
/// 3. the first span starting at `SELECT` or a `WITH … AS (` header, up to
///    and including the first `;`, or to the end of the text.
pub fn classify_output(raw: &str) -> ModelOutputClass {
    if is_abstention(raw) {
        return ModelOutputClass::Abstention;
    }
    match extract_sql(raw) {
        Some(sql) => ModelOutputClass::Sql(sql),
        None => ModelOutputClass::Unusable(raw.to_string()),
    }
}

fn is_abstention(raw: &str) -> bool {
    let mut outside = String::with_capacity(raw.len());
    let mut last = 0;
    for fence in FENCE.captures_iter(raw) {
        let whole = fence.get(0).unwrap();
        outside.push_str(&raw[last..whole.start()]);
        outside.push('\n');
        last = whole.end();
        if is_bare_marker(&fence_body(&fence[1])) {
            return true;
        }
    }
    outside.push_str(&raw[last..]);
    outside.to_lowercase().contains(ABSTENTION_MARKER)
}

fn is_bare_marker(text: &str) -> bool {
    let stripped = text.trim().trim_matches(|c: char| matches!(c, '"' | '\'' | '`' | '.' | '!')).trim();
    stripped.eq_ignore_ascii_case(ABSTENTION_MARKER)
}

/// Drops an info-string such as `sql` from the first line of a fence.
fn fence_body(inner: &str) -> String {
    if let Some((first, rest)) = inner.split_once('\n') {
        let tag = first.trim();
        let looks_like_tag = !tag.is_empty()
            && tag.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
            && !tag.eq_ignore_ascii_case("select")
            && !tag.eq_ignore_ascii_case("with");
        if looks_like_tag {
            return rest.trim().to_string();
        }
    }
    inner.trim().to_string()
}

fn extract_sql(raw: &str) -> Option<String> {
    if let Some(fence) = FENCE.captures(raw) {
        let body = fence_body(&fence[1]);
        if !body.is_empty() {
            return Some(body);
        }
    }
    if let Some(pos) = raw.rfind(SQL_MARKER) {
        let tail = raw[pos + SQL_MARKER.len()..].trim();
        if !tail.is_empty() {
            return Some(tail.to_string());
        }
    }
    let start = [SELECT_START.find(raw), WITH_START.find(raw)].into_iter().flatten().map(|m| m.start()).min()?;
    let rest = &raw[start..];
    let candidate = match rest.find(';') {
        Some(end) => &rest[..=end],
        None => rest,
    };
    let candidate = candidate.trim();
    (!candidate.is_empty()).then(|| candidate.to_string())
}

/// Lowercases, collapses whitespace runs to one space, trims, and removes the
/// trailing statement terminator. A run of terminators (`;;`, `; ;`) is
/// removed as a whole so that normalization stays idempotent.
pub fn normalize_sql(sql: &str) -> String {
    let collapsed = sql.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed.trim_end_matches([';', ' ']).to_string()
}
