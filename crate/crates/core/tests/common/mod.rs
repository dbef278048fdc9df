#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use carefulsql_core::dataset::{load_questions, QuestionItem};
use carefulsql_core::executor::{Executor, Limits};
use carefulsql_core::llm::{LlmClient, ScriptedProvider};
use carefulsql_core::pipeline::Pipeline;
use carefulsql_core::retriever::{HashingEmbedder, Retriever};
use carefulsql_core::schema::{load_schema, SchemaModel};

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn fixture(name: &str) -> PathBuf {
    fixtures_dir().join(name)
}

/// Loads the fixture dump into a fresh SQLite file under `dir`.
pub fn materialize_db(dir: &Path) -> PathBuf {
    let path = dir.join("oncomx_mini.sqlite");
    let dump = std::fs::read_to_string(fixture("oncomx_mini.sql")).unwrap();
    let conn = rusqlite::Connection::open(&path).unwrap();
    conn.execute_batch(&dump).unwrap();
    drop(conn);
    path
}

pub fn schema() -> SchemaModel {
    load_schema(fixture("oncomx_mini.schema.json")).unwrap()
}

pub fn dev() -> Vec<QuestionItem> {
    load_questions(fixture("dev.json")).unwrap()
}

pub fn seed() -> Vec<QuestionItem> {
    load_questions(fixture("seed.json")).unwrap()
}

pub fn naq() -> Vec<QuestionItem> {
    load_questions(fixture("naq.json")).unwrap()
}

/// Pipeline over the fixture database and pools, answering from `replies`.
pub fn scripted_pipeline(db: &Path, replies: &[&str]) -> (Pipeline, Arc<ScriptedProvider>) {
    let provider = Arc::new(ScriptedProvider::new(replies.iter().map(|r| r.to_string())));
    let retriever = Retriever::build(Arc::new(HashingEmbedder::default()), &seed(), &naq()).unwrap();
    let executor = Executor::connect(db.to_str().unwrap(), Limits::default(), 2).unwrap();
    let pipeline = Pipeline {
        schema: Arc::new(schema()),
        retriever: Arc::new(retriever),
        llm: Arc::new(LlmClient::scripted(provider.clone())),
        executor: Arc::new(executor),
        model: "scripted".into(),
    };
    (pipeline, provider)
}
