//! The per-question state machine.
//!
//! prompt → complete → classify → (one re-prompt if unusable) → execute →
//! (up to three corrections on database errors) → verdict. In UI mode a
//! final enrichment call explains an abstention or summarizes a result.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{ExecError, Executor, ResultTable};
use crate::llm::{ChatRequest, ChatResponse, LlmClient, LlmError};
use crate::prompt::{build_prompt, ExampleRef, PromptConfig, PromptError, Question};
use crate::retriever::Retriever;
use crate::schema::{render_schema_prompt, SchemaModel};
use crate::sqltext::{classify_output, ModelOutputClass};

pub const REPROMPT_MESSAGE: &str = "Please return a SQL query or 'unanswerable question' if the question cannot be answered with an SQL query on the database.";
pub const MAX_CORRECTIONS: usize = 3;
pub const SUMMARY_MAX_ROWS: usize = 20;

pub fn correction_message(error: &ExecError) -> String {
    format!("Please correct the SQL query based on the following error message: {}", error.message)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("prompt assembly failed: {0}")]
    Prompt(#[from] PromptError),
    #[error("LLM call failed during {stage:?} after {calls_made} successful calls: {source}")]
    Llm { stage: CallKind, calls_made: usize, source: LlmError },
}

impl PipelineError {
    pub fn llm_error(&self) -> Option<&LlmError> {
        match self {
            PipelineError::Llm { source, .. } => Some(source),
            PipelineError::Prompt(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub correction_loop: bool,
    pub ui_mode: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self { correction_loop: true, ui_mode: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Initial,
    Reprompt,
    Correction,
    ExplainAbstention,
    SummarizeResult,
}

impl CallKind {
    pub fn is_enrichment(self) -> bool {
        matches!(self, CallKind::ExplainAbstention | CallKind::SummarizeResult)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub kind: CallKind,
    pub enrichment: bool,
    pub request: ChatRequest,
    pub response: ChatResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum PipelineVerdict {
    Executed { sql: String, table: ResultTable },
    Abstained { raw: String },
    DbFailed { sql: String, error: ExecError },
    Unusable { raw: String },
}

impl PipelineVerdict {
    pub fn name(&self) -> &'static str {
        match self {
            PipelineVerdict::Executed { .. } => "executed",
            PipelineVerdict::Abstained { .. } => "abstained",
            PipelineVerdict::DbFailed { .. } => "db_failed",
            PipelineVerdict::Unusable { .. } => "unusable",
        }
    }

    /// The final SQL, if the model produced any.
    pub fn sql(&self) -> Option<&str> {
        match self {
            PipelineVerdict::Executed { sql, .. } | PipelineVerdict::DbFailed { sql, .. } => Some(sql),
            _ => None,
        }
    }

    pub fn is_abstained(&self) -> bool {
        matches!(self, PipelineVerdict::Abstained { .. })
    }
}

/// Steps in the order they happened; the service turns these into stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum PipelineEvent {
    PromptBuilt { examples: usize },
    LlmCalled { kind: CallKind, output: Option<ModelOutputClass> },
    Executed { sql: String, rows: usize, truncated: bool },
    ExecutionFailed { sql: String, error: ExecError },
    EnrichmentFailed { kind: CallKind, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub question_id: Option<String>,
    pub question: String,
    pub config: PromptConfig,
    pub options: PipelineOptions,
    pub verdict: PipelineVerdict,
    pub transcript: Vec<TranscriptEntry>,
    pub reprompts_used: usize,
    pub corrections_used: usize,
    pub example_ids_used: Vec<ExampleRef>,
    pub events: Vec<PipelineEvent>,
    pub explanation: Option<String>,
    pub short_answer: Option<String>,
}

impl PipelineOutcome {
    /// LLM calls made by the state machine itself, excluding enrichment.
    pub fn pipeline_calls(&self) -> usize {
        self.transcript.iter().filter(|e| !e.enrichment).count()
    }

    pub fn enrichment_calls(&self) -> usize {
        self.transcript.len() - self.pipeline_calls()
    }
}

/// Everything a question needs: schema, example pools, model and database.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub schema: Arc<SchemaModel>,
    pub retriever: Arc<Retriever>,
    pub llm: Arc<LlmClient>,
    pub executor: Arc<Executor>,
    pub model: String,
}

struct Run<'a> {
    pipeline: &'a Pipeline,
    transcript: Vec<TranscriptEntry>,
    events: Vec<PipelineEvent>,
}

impl Run<'_> {
    fn call(&mut self, kind: CallKind, request: ChatRequest) -> Result<(String, ModelOutputClass), PipelineError> {
        let response = self.pipeline.llm.complete(&request).map_err(|source| PipelineError::Llm {
            stage: kind,
            calls_made: self.transcript.len(),
            source,
        })?;
        let raw = response.text.clone();
        let class = classify_output(&raw);
        self.events.push(PipelineEvent::LlmCalled { kind, output: Some(class.clone()) });
        self.transcript.push(TranscriptEntry { kind, enrichment: false, request, response });
        Ok((raw, class))
    }

    fn execute(&mut self, sql: &str) -> Result<ResultTable, ExecError> {
        let result = self.pipeline.executor.execute_sql(sql);
        self.events.push(match &result {
            Ok(table) => {
                PipelineEvent::Executed { sql: sql.to_string(), rows: table.rows.len(), truncated: table.truncated }
            }
            Err(error) => PipelineEvent::ExecutionFailed { sql: sql.to_string(), error: error.clone() },
        });
        result
    }

    fn enrich(&mut self, kind: CallKind, request: ChatRequest) -> Option<String> {
        match self.pipeline.llm.complete(&request) {
            Ok(response) => {
                let text = response.text.trim().to_string();
                self.events.push(PipelineEvent::LlmCalled { kind, output: None });
                self.transcript.push(TranscriptEntry { kind, enrichment: true, request, response });
                Some(text)
            }
            Err(err) => {
                log::warn!("{kind:?} enrichment failed: {err}");
                self.events.push(PipelineEvent::EnrichmentFailed { kind, error: err.to_string() });
                None
            }
        }
    }
}

impl Pipeline {
    pub fn answer_question(
        &self,
        question: &Question,
        config: &PromptConfig,
        options: PipelineOptions,
    ) -> Result<PipelineOutcome, PipelineError> {
        let prompt = build_prompt(question, &self.schema, config, &self.retriever)?;
        let mut run = Run { pipeline: self, transcript: Vec::new(), events: Vec::new() };
        run.events.push(PipelineEvent::PromptBuilt { examples: prompt.example_ids_used.len() });

        let mut request = ChatRequest::new(&self.model, prompt.system_text, prompt.user_text);
        let (mut raw, mut class) = run.call(CallKind::Initial, request.clone())?;
        let mut reprompts_used = 0;
        let mut corrections_used = 0;

        if matches!(class, ModelOutputClass::Unusable(_)) {
            request = request.follow_up(raw, REPROMPT_MESSAGE);
            (raw, class) = run.call(CallKind::Reprompt, request.clone())?;
            reprompts_used = 1;
        }

        let verdict = loop {
            let sql = match class {
                ModelOutputClass::Abstention => break PipelineVerdict::Abstained { raw },
                ModelOutputClass::Unusable(_) => break PipelineVerdict::Unusable { raw },
                ModelOutputClass::Sql(sql) => sql,
            };
            let error = match run.execute(&sql) {
                Ok(table) => break PipelineVerdict::Executed { sql, table },
                Err(error) => error,
            };
            if !options.correction_loop || corrections_used == MAX_CORRECTIONS {
                break PipelineVerdict::DbFailed { sql, error };
            }
            request = request.follow_up(raw, correction_message(&error));
            (raw, class) = run.call(CallKind::Correction, request.clone())?;
            corrections_used += 1;
        };

        let (mut explanation, mut short_answer) = (None, None);
        if options.ui_mode {
            match &verdict {
                PipelineVerdict::Abstained { raw } => {
                    explanation = run.enrich(
                        CallKind::ExplainAbstention,
                        explain_request(&self.schema, &self.model, &question.text, raw),
                    );
                }
                PipelineVerdict::Executed { table, .. } => {
                    short_answer =
                        run.enrich(CallKind::SummarizeResult, summary_request(&self.model, &question.text, table));
                }
                _ => {}
            }
        }

        Ok(PipelineOutcome {
            question_id: question.id.clone(),
            question: question.text.clone(),
            config: *config,
            options,
            verdict,
            transcript: run.transcript,
            reprompts_used,
            corrections_used,
            example_ids_used: prompt.example_ids_used,
            events: run.events,
            explanation,
            short_answer,
        })
    }

    /// One enrichment call explaining why `question` was declined.
    pub fn explain_abstention(&self, question: &str, raw_output: &str) -> Result<String, LlmError> {
        let request = explain_request(&self.schema, &self.model, question, raw_output);
        Ok(self.llm.complete(&request)?.text.trim().to_string())
    }

    /// One enrichment call turning a result table into a short answer.
    pub fn summarize_result(&self, question: &str, table: &ResultTable) -> Result<String, LlmError> {
        let request = summary_request(&self.model, question, table);
        Ok(self.llm.complete(&request)?.text.trim().to_string())
    }
}

pub fn explain_request(schema: &SchemaModel, model: &str, question: &str, raw_output: &str) -> ChatRequest {
    let system = format!(
        "You help users of a natural language interface to a relational database. \
The assistant declined to translate a question into SQL. Using the schema below, explain briefly \
why the question cannot be answered from this database and suggest how the user could rephrase it \
so that it can be answered.\n\nDatabase schema:\n{}",
        render_schema_prompt(schema).trim_end()
    );
    let user = format!("Question: {}\nAssistant output: {}", question.trim(), raw_output.trim());
    ChatRequest::new(model, system, user)
}

pub fn summary_request(model: &str, question: &str, table: &ResultTable) -> ChatRequest {
    let shown = table.rows.len().min(SUMMARY_MAX_ROWS);
    let mut rendered = table.columns.join(" | ");
    for row in table.rows.iter().take(shown) {
        rendered.push('\n');
        rendered.push_str(&row.iter().map(ToString::to_string).collect::<Vec<_>>().join(" | "));
    }
    let more = if table.rows.len() > shown || table.truncated {
        format!("\n(first {shown} rows shown; the full result has more)")
    } else {
        String::new()
    };
    let system = "Answer the user's question in one or two sentences using only the SQL result provided. \
Do not mention SQL.";
    let user = format!("Question: {}\nResult:\n{rendered}{more}", question.trim());
    ChatRequest::new(model, system, user)
}
