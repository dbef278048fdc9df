//! Request handling behind the HTTP API, kept free of any web framework so
//! it can be exercised directly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::executor::Cell;
use crate::llm::LlmError;
use crate::pipeline::{
    CallKind, Pipeline, PipelineError, PipelineEvent, PipelineOptions, PipelineOutcome, PipelineVerdict,
};
use crate::prompt::{PromptConfig, Question};
use crate::sqltext::ModelOutputClass;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const PREVIEW_ROWS: usize = 200;
pub const ABSTENTION_NOTICE: &str = "The question cannot be answered reliably from this database. \
Try naming the table or column you mean, giving exact values, and stating any comparison explicitly.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskRequest {
    pub question: String,
    #[serde(default)]
    pub model: Option<String>,
    /// Prompt regime such as `nar-both-5`; the service default when absent.
    #[serde(default)]
    pub config: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub status: String,
    pub detail: String,
}

impl Stage {
    fn new(name: &str, status: &str, detail: impl Into<String>) -> Self {
        Self { name: name.into(), status: status.into(), detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskResponse {
    pub verdict: String,
    pub sql: Option<String>,
    pub columns: Option<Vec<String>>,
    pub rows: Option<Vec<Vec<Cell>>>,
    pub row_count: Option<usize>,
    pub truncated: bool,
    pub short_answer: Option<String>,
    pub explanation: Option<String>,
    pub error: Option<String>,
    pub stages: Vec<Stage>,
    pub transcript_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceError {
    #[serde(skip)]
    pub status: u16,
    pub error: String,
    pub stage: String,
    pub detail: String,
}

impl ServiceError {
    fn new(status: u16, stage: &str, error: &str, detail: impl Into<String>) -> Self {
        Self { status, error: error.into(), stage: stage.into(), detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub db: String,
    pub llm: String,
    pub version: String,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub problems: Vec<String>,
}

/// Stores each outcome as `<dir>/<uuid>.json`.
#[derive(Debug, Clone)]
pub struct TranscriptStore {
    dir: PathBuf,
}

impl TranscriptStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn save(&self, outcome: &PipelineOutcome) -> std::io::Result<String> {
        std::fs::create_dir_all(&self.dir)?;
        let id = uuid::Uuid::new_v4().to_string();
        let text = serde_json::to_string_pretty(outcome).map_err(std::io::Error::other)?;
        std::fs::write(self.path_for(&id).expect("fresh uuid"), text)?;
        Ok(id)
    }

    /// Only canonical UUIDs are accepted, which also rules out path tricks.
    pub fn path_for(&self, id: &str) -> Option<PathBuf> {
        let parsed = uuid::Uuid::parse_str(id).ok()?;
        (parsed.hyphenated().to_string() == id).then(|| self.dir.join(format!("{id}.json")))
    }

    pub fn load(&self, id: &str) -> Option<Value> {
        let text = std::fs::read_to_string(self.path_for(id)?).ok()?;
        serde_json::from_str(&text).ok()
    }
}

#[derive(Debug, Clone)]
pub struct Service {
    pub pipeline: Pipeline,
    pub models: Vec<String>,
    pub default_config: PromptConfig,
    pub correction_loop: bool,
    pub transcripts: TranscriptStore,
}

impl Service {
    pub fn list_models(&self) -> Vec<String> {
        if self.models.is_empty() {
            vec![self.pipeline.model.clone()]
        } else {
            self.models.clone()
        }
    }

    pub fn health(&self) -> Health {
        let mut problems = Vec::new();
        let db = match self.pipeline.executor.ping() {
            Ok(()) => "ok",
            Err(e) => {
                problems.push(format!("db: {e}"));
                "fail"
            }
        };
        let llm = match self.pipeline.llm.probe() {
            Ok(()) => "ok",
            Err(e) => {
                problems.push(format!("llm: {e}"));
                "fail"
            }
        };
        Health { db: db.into(), llm: llm.into(), version: VERSION.into(), problems }
    }

    pub fn handle_ask(&self, request: &AskRequest) -> Result<AskResponse, ServiceError> {
        let question = request.question.trim();
        if question.is_empty() {
            return Err(ServiceError::new(400, "validation", "empty question", "the question must not be empty"));
        }
        let config = match &request.config {
            Some(regime) => regime
                .parse::<PromptConfig>()
                .map_err(|e| ServiceError::new(400, "validation", "invalid config", e.to_string()))?,
            None => self.default_config,
        };
        let mut pipeline = self.pipeline.clone();
        if let Some(model) = request.model.as_deref().filter(|m| !m.is_empty()) {
            if !self.list_models().iter().any(|m| m == model) {
                return Err(ServiceError::new(
                    400,
                    "validation",
                    "unknown model",
                    format!("model `{model}` is not offered"),
                ));
            }
            pipeline.model = model.to_string();
        }
        let options = PipelineOptions { correction_loop: self.correction_loop, ui_mode: true };
        let outcome = pipeline.answer_question(&Question::adhoc(question), &config, options).map_err(pipeline_error)?;
        let transcript_id = self
            .transcripts
            .save(&outcome)
            .map_err(|e| ServiceError::new(500, "transcript", "cannot store transcript", e.to_string()))?;
        Ok(to_response(&outcome, transcript_id))
    }
}

fn pipeline_error(err: PipelineError) -> ServiceError {
    match &err {
        PipelineError::Prompt(e) => ServiceError::new(500, "prompt-built", "prompt assembly failed", e.to_string()),
        PipelineError::Llm { source: LlmError::InvalidRequest(_), .. } => {
            ServiceError::new(500, "llm-called", "invalid LLM request", err.to_string())
        }
        PipelineError::Llm { .. } => ServiceError::new(502, "llm-called", "LLM endpoint failed", err.to_string()),
    }
}

fn call_label(kind: CallKind) -> &'static str {
    match kind {
        CallKind::Initial => "initial",
        CallKind::Reprompt => "re-prompt",
        CallKind::Correction => "correction",
        CallKind::ExplainAbstention => "explain abstention",
        CallKind::SummarizeResult => "summarize result",
    }
}

/// One stage per event, closing with the verdict.
pub fn stages_for(outcome: &PipelineOutcome) -> Vec<Stage> {
    let mut stages = Vec::with_capacity(outcome.events.len() + 1);
    let mut executions = 0;
    for event in &outcome.events {
        stages.push(match event {
            PipelineEvent::PromptBuilt { examples } => Stage::new("prompt-built", "ok", format!("{examples} examples")),
            PipelineEvent::LlmCalled { kind, output } => {
                let class = match output {
                    Some(ModelOutputClass::Sql(_)) => ": sql",
                    Some(ModelOutputClass::Abstention) => ": abstention",
                    Some(ModelOutputClass::Unusable(_)) => ": unusable",
                    None => "",
                };
                Stage::new("llm-called", "ok", format!("{}{class}", call_label(*kind)))
            }
            PipelineEvent::Executed { rows, truncated, .. } => {
                executions += 1;
                let name = if executions == 1 { "executed" } else { "corrected" };
                let more = if *truncated { " (truncated)" } else { "" };
                Stage::new(name, "ok", format!("{rows} rows{more}"))
            }
            PipelineEvent::ExecutionFailed { error, .. } => {
                executions += 1;
                let name = if executions == 1 { "executed" } else { "corrected" };
                Stage::new(name, "error", error.message.clone())
            }
            PipelineEvent::EnrichmentFailed { kind, error } => {
                Stage::new("enrichment", "error", format!("{}: {error}", call_label(*kind)))
            }
        });
    }
    stages.push(Stage::new("verdict", "ok", outcome.verdict.name()));
    stages
}

pub fn to_response(outcome: &PipelineOutcome, transcript_id: String) -> AskResponse {
    let mut response = AskResponse {
        verdict: String::new(),
        sql: None,
        columns: None,
        rows: None,
        row_count: None,
        truncated: false,
        short_answer: None,
        explanation: None,
        error: None,
        stages: stages_for(outcome),
        transcript_id,
    };
    match &outcome.verdict {
        PipelineVerdict::Executed { sql, table } => {
            let preview = table.head(PREVIEW_ROWS);
            response.verdict = "sql".into();
            response.sql = Some(sql.clone());
            response.columns = Some(preview.columns);
            response.rows = Some(preview.rows);
            response.row_count = Some(table.rows.len());
            response.truncated = preview.truncated;
            response.short_answer = outcome.short_answer.clone();
        }
        PipelineVerdict::Abstained { .. } => {
            response.verdict = "abstained".into();
            response.explanation = Some(outcome.explanation.clone().unwrap_or_else(|| ABSTENTION_NOTICE.into()));
        }
        PipelineVerdict::DbFailed { sql, error } => {
            response.verdict = "db_failed".into();
            response.sql = Some(sql.clone());
            response.error = Some(error.message.clone());
        }
        PipelineVerdict::Unusable { .. } => {
            response.verdict = "unusable".into();
            response.error = Some("the model returned neither SQL nor an abstention".into());
        }
    }
    response
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transcript_ids_must_be_uuids() {
        let store = TranscriptStore::new("/tmp/x");
        assert!(store.path_for("../../etc/passwd").is_none());
        assert!(store.path_for("not-a-uuid").is_none());
        let id = uuid::Uuid::new_v4().to_string();
        assert_eq!(store.path_for(&id).unwrap(), PathBuf::from(format!("/tmp/x/{id}.json")));
        assert!(store.path_for(&id.to_uppercase()).is_none());
    }
}
