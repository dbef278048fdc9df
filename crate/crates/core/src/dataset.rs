//! Question sets, the gold-result cache and LLM-assisted generation of
//! unanswerable-question candidates.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{Cell, ExecError, Executor, ResultTable};
use crate::llm::{ChatRequest, LlmClient, LlmError};
use crate::parallel::parallel_map;
use crate::schema::{render_schema_prompt, SchemaModel};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dataset document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid dataset: {0}")]
    Validation(String),
    #[error("database unavailable: {0}")]
    Connection(ExecError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("model returned no usable {0} candidates")]
    EmptyGeneration(NaqCategory),
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NaqCategory {
    NonSql,
    ColumnsMissing,
    ValuesMissing,
    OutOfDomain,
    ColumnAmbiguous,
    ValueAmbiguous,
    ContextualAmbiguous,
    OperatorAmbiguous,
}

impl NaqCategory {
    pub const ALL: [NaqCategory; 8] = [
        NaqCategory::NonSql,
        NaqCategory::ColumnsMissing,
        NaqCategory::ValuesMissing,
        NaqCategory::OutOfDomain,
        NaqCategory::ColumnAmbiguous,
        NaqCategory::ValueAmbiguous,
        NaqCategory::ContextualAmbiguous,
        NaqCategory::OperatorAmbiguous,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NaqCategory::NonSql => "non_sql",
            NaqCategory::ColumnsMissing => "columns_missing",
            NaqCategory::ValuesMissing => "values_missing",
            NaqCategory::OutOfDomain => "out_of_domain",
            NaqCategory::ColumnAmbiguous => "column_ambiguous",
            NaqCategory::ValueAmbiguous => "value_ambiguous",
            NaqCategory::ContextualAmbiguous => "contextual_ambiguous",
            NaqCategory::OperatorAmbiguous => "operator_ambiguous",
        }
    }

    /// Short definition used in generation prompts and the no-answer rules.
    pub fn definition(self) -> &'static str {
        match self {
            NaqCategory::NonSql => "asks for an explanation, opinion or procedure that no database query can produce",
            NaqCategory::ColumnsMissing => "asks for an attribute that no column of the schema stores",
            NaqCategory::ValuesMissing => {
                "filters on a value that the relevant columns can never contain, although the columns exist"
            }
            NaqCategory::OutOfDomain => "needs knowledge from outside the database or outside its subject area",
            NaqCategory::ColumnAmbiguous => {
                "could be answered from several different columns and does not say which one is meant"
            }
            NaqCategory::ValueAmbiguous => "uses a term that could match several different stored values or entities",
            NaqCategory::ContextualAmbiguous => {
                "refers to something (a pronoun, 'it', 'that one') whose meaning depends on missing context"
            }
            NaqCategory::OperatorAmbiguous => {
                "implies a comparison or threshold (more, better, slightly) without stating the operator or cut-off"
            }
        }
    }

    fn generation_prompt(self) -> &'static str {
        match self {
            NaqCategory::NonSql => include_str!("../resources/naq_generation/v1/non_sql.txt"),
            NaqCategory::ColumnsMissing => {
                include_str!("../resources/naq_generation/v1/columns_missing.txt")
            }
            NaqCategory::ValuesMissing => {
                include_str!("../resources/naq_generation/v1/values_missing.txt")
            }
            NaqCategory::OutOfDomain => {
                include_str!("../resources/naq_generation/v1/out_of_domain.txt")
            }
            NaqCategory::ColumnAmbiguous => {
                include_str!("../resources/naq_generation/v1/column_ambiguous.txt")
            }
            NaqCategory::ValueAmbiguous => {
                include_str!("../resources/naq_generation/v1/value_ambiguous.txt")
            }
            NaqCategory::ContextualAmbiguous => {
                include_str!("../resources/naq_generation/v1/contextual_ambiguous.txt")
            }
            NaqCategory::OperatorAmbiguous => {
                include_str!("../resources/naq_generation/v1/operator_ambiguous.txt")
            }
        }
    }
}

impl fmt::Display for NaqCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NaqCategory {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NaqCategory::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| {
            let legal: Vec<&str> = NaqCategory::ALL.iter().map(|c| c.as_str()).collect();
            DatasetError::Validation(format!("unknown category `{s}`; expected one of: {}", legal.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gold {
    Answerable { sql: String },
    Unanswerable { category: NaqCategory },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawItem", into = "RawItem")]
pub struct QuestionItem {
    pub id: String,
    pub question: String,
    pub gold: Gold,
}

impl QuestionItem {
    pub fn answerable(id: impl Into<String>, question: impl Into<String>, sql: impl Into<String>) -> Self {
        Self { id: id.into(), question: question.into(), gold: Gold::Answerable { sql: sql.into() } }
    }

    pub fn unanswerable(id: impl Into<String>, question: impl Into<String>, category: NaqCategory) -> Self {
        Self { id: id.into(), question: question.into(), gold: Gold::Unanswerable { category } }
    }

    pub fn is_answerable(&self) -> bool {
        matches!(self.gold, Gold::Answerable { .. })
    }

    pub fn gold_sql(&self) -> Option<&str> {
        match &self.gold {
            Gold::Answerable { sql } => Some(sql),
            Gold::Unanswerable { .. } => None,
        }
    }

    pub fn category(&self) -> Option<NaqCategory> {
        match self.gold {
            Gold::Unanswerable { category } => Some(category),
            Gold::Answerable { .. } => None,
        }
    }

    pub fn label(&self) -> Label {
        if self.is_answerable() {
            Label::Answerable
        } else {
            Label::Unanswerable
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Answerable,
    Unanswerable,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Answerable => "answerable",
            Label::Unanswerable => "unanswerable",
        }
    }
}

/// On-disk shape of one dataset item.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawItem {
    id: String,
    question: String,
    label: Label,
    #[serde(default)]
    gold_sql: Option<String>,
    #[serde(default)]
    category: Option<String>,
}

impl TryFrom<RawItem> for QuestionItem {
    type Error = DatasetError;

    fn try_from(raw: RawItem) -> Result<Self, Self::Error> {
        let invalid = |msg: &str| DatasetError::Validation(format!("item `{}`: {msg}", raw.id));
        if raw.id.trim().is_empty() {
            return Err(DatasetError::Validation("item with empty id".into()));
        }
        if raw.question.trim().is_empty() {
            return Err(invalid("empty question"));
        }
        let gold = match raw.label {
            Label::Answerable => {
                if raw.category.is_some() {
                    return Err(invalid("answerable item must not have a category"));
                }
                match raw.gold_sql {
                    Some(ref sql) if !sql.trim().is_empty() => Gold::Answerable { sql: sql.clone() },
                    _ => return Err(invalid("answerable item requires gold_sql")),
                }
            }
            Label::Unanswerable => {
                if raw.gold_sql.is_some() {
                    return Err(invalid("unanswerable item must not have gold_sql"));
                }
                let name = raw.category.as_deref().ok_or_else(|| invalid("unanswerable item requires a category"))?;
                let category = name.parse().map_err(|e: DatasetError| {
                    DatasetError::Validation(format!("item `{}`: {}", raw.id, strip_prefix(&e)))
                })?;
                Gold::Unanswerable { category }
            }
        };
        Ok(QuestionItem { id: raw.id, question: raw.question, gold })
    }
}

fn strip_prefix(err: &DatasetError) -> String {
    match err {
        DatasetError::Validation(m) => m.clone(),
        other => other.to_string(),
    }
}

impl From<QuestionItem> for RawItem {
    fn from(item: QuestionItem) -> Self {
        let (label, gold_sql, category) = match item.gold {
            Gold::Answerable { sql } => (Label::Answerable, Some(sql), None),
            Gold::Unanswerable { category } => (Label::Unanswerable, None, Some(category.as_str().to_string())),
        };
        RawItem { id: item.id, question: item.question, label, gold_sql, category }
    }
}

pub fn parse_questions(text: &str) -> Result<Vec<QuestionItem>, DatasetError> {
    let raw: Vec<RawItem> = serde_json::from_str(text)?;
    let mut items = Vec::with_capacity(raw.len());
    let mut seen = HashSet::new();
    for r in raw {
        let item = QuestionItem::try_from(r)?;
        if !seen.insert(item.id.clone()) {
            return Err(DatasetError::Validation(format!("duplicate id `{}`", item.id)));
        }
        items.push(item);
    }
    Ok(items)
}

pub fn load_questions(path: impl AsRef<Path>) -> Result<Vec<QuestionItem>, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_error(path))?;
    parse_questions(&text)
}

pub fn questions_to_json(items: &[QuestionItem]) -> String {
    let mut text = serde_json::to_string_pretty(items).expect("items serialize");
    text.push('\n');
    text
}

pub fn save_questions(path: impl AsRef<Path>, items: &[QuestionItem]) -> Result<(), DatasetError> {
    let path = path.as_ref();
    std::fs::write(path, questions_to_json(items)).map_err(io_error(path))
}

/// Answerable/unanswerable split and per-category counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetStats {
    pub answerable: usize,
    pub unanswerable: usize,
    pub by_category: BTreeMap<NaqCategory, usize>,
}

pub fn dataset_stats(items: &[QuestionItem]) -> DatasetStats {
    let mut stats = DatasetStats::default();
    for item in items {
        match item.category() {
            None => stats.answerable += 1,
            Some(c) => {
                stats.unanswerable += 1;
                *stats.by_category.entry(c).or_default() += 1;
            }
        }
    }
    stats
}

/// Gold execution result for one answerable item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldEntry {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub error: Option<String>,
}

impl GoldEntry {
    pub fn from_result(result: Result<ResultTable, ExecError>) -> Self {
        match result {
            Ok(table) => GoldEntry { columns: table.columns, rows: table.rows, error: None },
            Err(e) => GoldEntry { columns: Vec::new(), rows: Vec::new(), error: Some(e.message) },
        }
    }

    pub fn table(&self) -> Option<ResultTable> {
        self.error.is_none().then(|| ResultTable::new(self.columns.clone(), self.rows.clone()))
    }
}

/// Gold results keyed by question id; iteration and serialization are ordered by id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GoldResultCache {
    pub entries: BTreeMap<String, GoldEntry>,
}

impl GoldResultCache {
    pub fn get(&self, id: &str) -> Option<&GoldEntry> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("cache serializes");
        text.push('\n');
        text
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(io_error(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Executes every answerable item's gold SQL. Gold failures are recorded in
/// the entry; only an unreachable database aborts.
pub fn build_gold_cache(
    items: &[QuestionItem],
    executor: &Executor,
    workers: usize,
) -> Result<GoldResultCache, DatasetError> {
    executor.ping().map_err(DatasetError::Connection)?;
    let answerable: Vec<(&str, &str)> =
        items.iter().filter_map(|item| item.gold_sql().map(|sql| (item.id.as_str(), sql))).collect();
    let results = parallel_map(&answerable, workers, |(_, sql)| GoldEntry::from_result(executor.execute_sql(sql)));
    let entries = answerable.iter().zip(results).map(|((id, _), entry)| (id.to_string(), entry)).collect();
    Ok(GoldResultCache { entries })
}

pub const NAQ_PROMPT_VERSION: &str = "naq-generation/v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NaqCandidates {
    pub category: NaqCategory,
    pub prompt_version: String,
    pub requires_human_curation: bool,
    pub candidates: Vec<String>,
}

pub fn naq_generation_prompt(schema: &SchemaModel, category: NaqCategory, n: usize) -> String {
    category
        .generation_prompt()
        .replace("{schema}", render_schema_prompt(schema).trim_end())
        .replace("{definition}", category.definition())
        .replace("{n}", &n.to_string())
}

/// Asks the model for up to `n` candidate questions of one category.
/// Candidates are meant for human review, never for direct inclusion.
pub fn generate_naq_candidates(
    schema: &SchemaModel,
    category: NaqCategory,
    n: usize,
    llm: &LlmClient,
    model: &str,
) -> Result<NaqCandidates, DatasetError> {
    if n == 0 {
        return Err(DatasetError::Validation("candidate count must be at least 1".into()));
    }
    let system = "You write evaluation questions for natural-language database interfaces.";
    let request = ChatRequest::new(model, system, naq_generation_prompt(schema, category, n));
    let response = llm.complete(&request)?;
    let candidates = parse_candidates(&response.text, n);
    if candidates.is_empty() {
        return Err(DatasetError::EmptyGeneration(category));
    }
    Ok(NaqCandidates { category, prompt_version: NAQ_PROMPT_VERSION.into(), requires_human_curation: true, candidates })
}

/// One candidate per line; list markers and wrapping quotes are removed and
/// case-insensitive duplicates dropped.
fn parse_candidates(text: &str, n: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in text.lines() {
        let mut line = line.trim();
        line = line.trim_start_matches(['-', '*', '•']).trim_start();
        let digits = line.chars().take_while(char::is_ascii_digit).count();
        if digits > 0 {
            if let Some(rest) = line[digits..].strip_prefix(['.', ')', ':']) {
                line = rest.trim_start();
            }
        }
        let line = line.trim_matches('"').trim();
        if line.is_empty() || line.starts_with("```") {
            continue;
        }
        if seen.insert(line.to_lowercase()) {
            out.push(line.to_string());
        }
        if out.len() == n {
            break;
        }
    }
    out
}
