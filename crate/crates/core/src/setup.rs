//! Configuration file and construction of the pipeline's collaborators.
//!
//! The config is TOML or JSON (chosen by extension). Relative paths are
//! resolved against the config file's directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::load_questions;
use crate::executor::{Executor, Limits};
use crate::llm::{HttpChatProvider, LlmClient, ScriptedProvider, DEFAULT_MAX_IN_FLIGHT, DEFAULT_MODEL};
use crate::pipeline::Pipeline;
use crate::prompt::PromptConfig;
use crate::retriever::{Embedder, HashingEmbedder, HttpEmbedder, OfflineEmbedder, Retriever};
use crate::schema::load_schema;

#[derive(Debug, Error)]
#[error("{0}")]
pub struct SetupError(pub String);

impl SetupError {
    fn context(what: &str, err: impl std::fmt::Display) -> Self {
        SetupError(format!("{what}: {err}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// SQLite file, `.sql` dump, or `postgres://…` URL.
    pub database: Option<String>,
    pub schema: Option<PathBuf>,
    /// Answerable example pool.
    pub seed: Option<PathBuf>,
    /// Unanswerable example pool.
    pub naq: Option<PathBuf>,
    /// `hashing`, `hashing:<dim>`, a vectors JSON file, or an embeddings URL.
    pub embeddings: String,
    pub embedding_model: Option<String>,
    /// `scripted:<responses.json>` or a chat-completions URL.
    pub llm: Option<String>,
    /// Environment variable holding a bearer token for the LLM endpoint.
    pub api_key_env: Option<String>,
    /// Selectable models; the first is the default.
    pub models: Vec<String>,
    pub regime: String,
    pub transcripts_dir: PathBuf,
    pub query_timeout_secs: u64,
    pub max_rows: usize,
    pub llm_timeout_secs: u64,
    pub max_in_flight: usize,
    pub workers: usize,
    pub pool_size: usize,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            database: None,
            schema: None,
            seed: None,
            naq: None,
            embeddings: "hashing".into(),
            embedding_model: None,
            llm: None,
            api_key_env: None,
            models: Vec::new(),
            regime: "nar-both-5".into(),
            transcripts_dir: PathBuf::from("transcripts"),
            query_timeout_secs: 30,
            max_rows: 10_000,
            llm_timeout_secs: 120,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            workers: 4,
            pool_size: 4,
        }
    }
}

fn resolve(base: &Path, path: &mut Option<PathBuf>) {
    if let Some(p) = path {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

impl AppConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SetupError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SetupError::context(&path.display().to_string(), e))?;
        let mut config: AppConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| SetupError::context(&path.display().to_string(), e))?
        } else {
            toml::from_str(&text).map_err(|e| SetupError::context(&path.display().to_string(), e))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.schema);
        resolve(base, &mut self.seed);
        resolve(base, &mut self.naq);
        if self.transcripts_dir.is_relative() {
            self.transcripts_dir = base.join(&self.transcripts_dir);
        }
        if let Some(db) = &self.database {
            let is_file = !db.contains("://") && !db.starts_with("sqlite:");
            if is_file && Path::new(db).is_relative() {
                self.database = Some(base.join(db).display().to_string());
            }
        }
        let emb = &self.embeddings;
        if !emb.starts_with("hashing") && !emb.contains("://") && Path::new(emb).is_relative() {
            self.embeddings = base.join(emb).display().to_string();
        }
        if let Some(spec) = &self.llm {
            if let Some(file) = spec.strip_prefix("scripted:") {
                if Path::new(file).is_relative() {
                    self.llm = Some(format!("scripted:{}", base.join(file).display()));
                }
            }
        }
    }

    pub fn models(&self) -> Vec<String> {
        if self.models.is_empty() {
            vec![DEFAULT_MODEL.to_string()]
        } else {
            self.models.clone()
        }
    }

    pub fn default_model(&self) -> String {
        self.models().remove(0)
    }

    pub fn prompt_config(&self) -> Result<PromptConfig, SetupError> {
        self.regime.parse().map_err(|e| SetupError::context("regime", e))
    }

    pub fn limits(&self) -> Limits {
        Limits { timeout: Duration::from_secs(self.query_timeout_secs), max_rows: self.max_rows }
    }

    fn required<'a, T>(value: &'a Option<T>, name: &str) -> Result<&'a T, SetupError> {
        value.as_ref().ok_or_else(|| SetupError(format!("`{name}` is not configured")))
    }

    pub fn executor(&self) -> Result<Executor, SetupError> {
        let db = Self::required(&self.database, "database")?;
        Executor::connect(db, self.limits(), self.pool_size).map_err(|e| SetupError::context("database", e))
    }

    pub fn llm_client(&self) -> Result<LlmClient, SetupError> {
        let spec = Self::required(&self.llm, "llm")?;
        build_llm_client(spec, self, Duration::from_secs(self.llm_timeout_secs))
    }

    pub fn embedder(&self) -> Result<Arc<dyn Embedder>, SetupError> {
        let spec = self.embeddings.as_str();
        if spec == "hashing" {
            return Ok(Arc::new(HashingEmbedder::default()));
        }
        if let Some(dim) = spec.strip_prefix("hashing:") {
            let dim = dim.parse().map_err(|_| SetupError(format!("invalid hashing dimension `{dim}`")))?;
            return Ok(Arc::new(HashingEmbedder::new(dim)));
        }
        if spec.starts_with("http://") || spec.starts_with("https://") {
            let model = Self::required(&self.embedding_model, "embedding_model")?;
            let embedder = HttpEmbedder::new(spec, model, Duration::from_secs(self.llm_timeout_secs))
                .map_err(|e| SetupError::context("embeddings", e))?;
            return Ok(Arc::new(embedder));
        }
        Ok(Arc::new(OfflineEmbedder::from_file(spec).map_err(|e| SetupError::context("embeddings", e))?))
    }

    pub fn retriever(&self) -> Result<Retriever, SetupError> {
        let embedder = self.embedder()?;
        let load = |path: &Option<PathBuf>, name: &str| -> Result<_, SetupError> {
            match path {
                Some(p) => load_questions(p).map_err(|e| SetupError::context(name, e)),
                None => Ok(Vec::new()),
            }
        };
        let seed = load(&self.seed, "seed")?;
        let naq = load(&self.naq, "naq")?;
        Retriever::build(embedder, &seed, &naq).map_err(|e| SetupError::context("example pools", e))
    }

    pub fn pipeline(&self) -> Result<Pipeline, SetupError> {
        let schema_path = Self::required(&self.schema, "schema")?;
        let schema = load_schema(schema_path).map_err(|e| SetupError::context("schema", e))?;
        Ok(Pipeline {
            schema: Arc::new(schema),
            retriever: Arc::new(self.retriever()?),
            llm: Arc::new(self.llm_client()?),
            executor: Arc::new(self.executor()?),
            model: self.default_model(),
        })
    }
}

fn build_llm_client(spec: &str, config: &AppConfig, timeout: Duration) -> Result<LlmClient, SetupError> {
    if let Some(path) = spec.strip_prefix("scripted:") {
        let provider = ScriptedProvider::from_file(path).map_err(|e| SetupError::context("llm", e))?;
        return Ok(LlmClient::scripted(Arc::new(provider)));
    }
    let api_key = config.api_key_env.as_ref().and_then(|var| std::env::var(var).ok());
    let provider =
        HttpChatProvider::new(spec, timeout).map_err(|e| SetupError::context("llm", e))?.with_api_key(api_key);
    Ok(LlmClient::new(Arc::new(provider), config.max_in_flight))
}
