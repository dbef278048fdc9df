//! Prompt assembly.
//!
//! The system message is role instruction, then the no-answer rules (when
//! enabled), then the rendered schema. The user message lists retrieved
//! examples (answerable pool first, then unanswerable) followed by the
//! question itself in the `[Q]: … / [SQL]:` format.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Gold, Label, QuestionItem};
use crate::retriever::{RetrievalError, Retriever};
use crate::schema::{render_schema_prompt, SchemaModel};
use crate::sqltext::ABSTENTION_MARKER;

pub const ALLOWED_SHOTS: [usize; 4] = [0, 1, 3, 5];

const ROLE_INSTRUCTION: &str = "You are an expert in natural language to SQL translation. \
Given the database schema below, translate the user's question into a single syntactically correct \
PostgreSQL query. Return only the SQL query, without any explanation or commentary.";

const NO_ANSWER_RULES: &str = "\
No-answer rules:
Never guess. If a question cannot be answered reliably with a query on this database, do not write SQL; \
reply with exactly: unanswerable question
Reply unanswerable question when any of the following holds:
1. No SQL query can answer the question, because it asks for an explanation, cause, opinion or procedure.
2. The question asks for information the schema does not contain: no column stores the requested attribute, \
or the requested values cannot occur in the relevant columns.
3. The question needs knowledge from outside this database or outside its domain.
4. The question is ambiguous: several columns could be meant, a term could match several different values, \
it refers to context that was not given, or it implies a comparison or threshold without stating the operator or value.
Otherwise return only the SQL query.";

const QUESTION_HEADER: &str = "# Return the SQL for the following Question";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("invalid example `{0}`: answerable example has no SQL")]
    Validation(String),
    #[error("invalid prompt configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// Which example pools feed the few-shot blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExampleSelection {
    None,
    Aq,
    Naq,
    Both,
}

impl ExampleSelection {
    pub fn as_str(self) -> &'static str {
        match self {
            ExampleSelection::None => "none",
            ExampleSelection::Aq => "aq",
            ExampleSelection::Naq => "naq",
            ExampleSelection::Both => "both",
        }
    }
}

impl FromStr for ExampleSelection {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(ExampleSelection::None),
            "aq" => Ok(ExampleSelection::Aq),
            "naq" => Ok(ExampleSelection::Naq),
            "both" => Ok(ExampleSelection::Both),
            other => Err(PromptError::Config(format!(
                "unknown example selection `{other}` (expected none, aq, naq or both)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptConfig {
    pub shots: usize,
    pub include_nar: bool,
    pub include_answerable_examples: bool,
    pub include_unanswerable_examples: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self::new(0, true, ExampleSelection::None).expect("valid default")
    }
}

impl PromptConfig {
    pub fn new(shots: usize, include_nar: bool, examples: ExampleSelection) -> Result<Self, PromptError> {
        if !ALLOWED_SHOTS.contains(&shots) {
            return Err(PromptError::Config(format!("shots must be one of 0, 1, 3, 5 (got {shots})")));
        }
        Ok(Self {
            shots,
            include_nar,
            include_answerable_examples: matches!(examples, ExampleSelection::Aq | ExampleSelection::Both),
            include_unanswerable_examples: matches!(examples, ExampleSelection::Naq | ExampleSelection::Both),
        })
    }

    pub fn examples(&self) -> ExampleSelection {
        match (self.include_answerable_examples, self.include_unanswerable_examples) {
            (true, true) => ExampleSelection::Both,
            (true, false) => ExampleSelection::Aq,
            (false, true) => ExampleSelection::Naq,
            (false, false) => ExampleSelection::None,
        }
    }

    /// Pools that actually contribute examples under this configuration.
    pub fn active_pools(&self) -> Vec<Label> {
        if self.shots == 0 {
            return Vec::new();
        }
        let mut pools = Vec::new();
        if self.include_answerable_examples {
            pools.push(Label::Answerable);
        }
        if self.include_unanswerable_examples {
            pools.push(Label::Unanswerable);
        }
        pools
    }

    /// The standard evaluation grid: no-answer rules alone, then each
    /// example selection at 1, 3 and 5 shots.
    pub fn standard_grid() -> Vec<PromptConfig> {
        let mut grid = vec![PromptConfig::default()];
        for examples in [ExampleSelection::Aq, ExampleSelection::Naq, ExampleSelection::Both] {
            for shots in [1, 3, 5] {
                grid.push(PromptConfig::new(shots, true, examples).expect("valid grid entry"));
            }
        }
        grid
    }
}

/// Regime names look like `nar-both-5` or `nonar-aq-3`.
impl fmt::Display for PromptConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nar = if self.include_nar { "nar" } else { "nonar" };
        write!(f, "{nar}-{}-{}", self.examples().as_str(), self.shots)
    }
}

impl FromStr for PromptConfig {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split('-').collect();
        let [nar, examples, shots] = parts.as_slice() else {
            return Err(PromptError::Config(format!("regime `{s}` must look like nar-both-5 (rules-examples-shots)")));
        };
        let include_nar = match *nar {
            "nar" => true,
            "nonar" => false,
            other => return Err(PromptError::Config(format!("expected nar or nonar, got `{other}`"))),
        };
        let shots = shots.parse().map_err(|_| PromptError::Config(format!("invalid shot count `{shots}`")))?;
        PromptConfig::new(shots, include_nar, examples.parse()?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRef {
    pub pool: Label,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembledPrompt {
    pub system_text: String,
    pub user_text: String,
    pub example_ids_used: Vec<ExampleRef>,
}

/// The question being asked; `id` is set when it comes from a dataset so
/// that it can be left out of its own example pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: Option<String>,
    pub text: String,
}

impl Question {
    pub fn adhoc(text: impl Into<String>) -> Self {
        Self { id: None, text: text.into() }
    }
}

impl From<&QuestionItem> for Question {
    fn from(item: &QuestionItem) -> Self {
        Self { id: Some(item.id.clone()), text: item.question.clone() }
    }
}

pub fn nar_rules_text() -> &'static str {
    NO_ANSWER_RULES
}

pub fn format_example(item: &QuestionItem) -> Result<String, PromptError> {
    let answer = match &item.gold {
        Gold::Answerable { sql } if sql.trim().is_empty() => return Err(PromptError::Validation(item.id.clone())),
        Gold::Answerable { sql } => sql.trim(),
        Gold::Unanswerable { .. } => ABSTENTION_MARKER,
    };
    Ok(format!("[Q]: {}\n[SQL]: {answer}", item.question.trim()))
}

pub fn format_question(question: &str) -> String {
    format!("{QUESTION_HEADER}\n[Q]: {}\n[SQL]:", question.trim())
}

pub fn system_text(schema: &SchemaModel, include_nar: bool) -> String {
    let mut text = String::from(ROLE_INSTRUCTION);
    text.push_str("\n\n");
    if include_nar {
        text.push_str(NO_ANSWER_RULES);
        text.push_str("\n\n");
    }
    text.push_str("Database schema:\n");
    text.push_str(render_schema_prompt(schema).trim_end());
    text.push('\n');
    text
}

pub fn build_prompt(
    question: &Question,
    schema: &SchemaModel,
    config: &PromptConfig,
    retriever: &Retriever,
) -> Result<AssembledPrompt, PromptError> {
    let pools = config.active_pools();
    let mut blocks = Vec::new();
    let mut example_ids_used = Vec::new();
    if !pools.is_empty() {
        let query = retriever.embed(&question.text)?;
        for pool in pools {
            for item in retriever.top_k(pool, &query, config.shots, question.id.as_deref())? {
                blocks.push(format_example(item)?);
                example_ids_used.push(ExampleRef { pool, id: item.id.clone() });
            }
        }
    }
    blocks.push(format_question(&question.text));
    Ok(AssembledPrompt {
        system_text: system_text(schema, config.include_nar),
        user_text: blocks.join("\n\n"),
        example_ids_used,
    })
}
