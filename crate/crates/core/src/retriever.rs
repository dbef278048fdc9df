//! Few-shot example retrieval by embedding cosine similarity.

use std::collections::HashMap;
use std::hash::Hasher;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::dataset::{Label, QuestionItem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("embedding provider failed: {0}")]
    Embedding(String),
    #[error("no precomputed vector for text: {0:?}")]
    MissingVector(String),
    #[error("vector dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("{0}")]
    InvalidStore(String),
}

pub type Vector = Vec<f64>;

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vector, RetrievalError>;

    fn describe(&self) -> String;
}

/// Vectors looked up from a JSON map `text -> [f64]`.
#[derive(Debug, Clone, Default)]
pub struct OfflineEmbedder {
    vectors: HashMap<String, Vector>,
}

impl OfflineEmbedder {
    pub fn new(vectors: HashMap<String, Vector>) -> Self {
        Self { vectors }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| RetrievalError::Embedding(format!("{}: {e}", path.display())))?;
        let vectors: HashMap<String, Vector> =
            serde_json::from_str(&text).map_err(|e| RetrievalError::Embedding(format!("{}: {e}", path.display())))?;
        Ok(Self { vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl Embedder for OfflineEmbedder {
    fn embed(&self, text: &str) -> Result<Vector, RetrievalError> {
        if text.trim().is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        self.vectors.get(text).cloned().ok_or_else(|| RetrievalError::MissingVector(text.to_string()))
    }

    fn describe(&self) -> String {
        format!("offline ({} vectors)", self.vectors.len())
    }
}

/// Deterministic bag-of-words embedding: lowercased word tokens and word
/// bigrams hashed (FNV-1a) into signed buckets. Needs no model server and is
/// stable across platforms and releases.
#[derive(Debug, Clone, Copy)]
pub struct HashingEmbedder {
    dimension: usize,
}

impl HashingEmbedder {
    pub const DEFAULT_DIMENSION: usize = 256;

    pub fn new(dimension: usize) -> Self {
        Self { dimension: dimension.max(2) }
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIMENSION)
    }
}

struct Fnv1a(u64);

impl Hasher for Fnv1a {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x100_0000_01b3);
        }
    }
}

fn fnv1a(text: &str) -> u64 {
    let mut h = Fnv1a(0xcbf2_9ce4_8422_2325);
    h.write(text.as_bytes());
    h.finish()
}

impl Embedder for HashingEmbedder {
    fn embed(&self, text: &str) -> Result<Vector, RetrievalError> {
        let tokens: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric() && c != '_')
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect();
        if tokens.is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        let mut v = vec![0.0; self.dimension];
        let mut add = |feature: &str, weight: f64| {
            let h = fnv1a(feature);
            let bucket = (h % self.dimension as u64) as usize;
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign * weight;
        };
        for t in &tokens {
            add(t, 1.0);
        }
        for pair in tokens.windows(2) {
            add(&format!("{} {}", pair[0], pair[1]), 0.5);
        }
        if v.iter().all(|x| *x == 0.0) {
            // Every feature cancelled out; fall back to a fixed direction.
            v[0] = 1.0;
        }
        Ok(v)
    }

    fn describe(&self) -> String {
        format!("hashing (dim {})", self.dimension)
    }
}

/// Embedding endpoint: OpenAI-compatible `/v1/embeddings` or Ollama
/// `/api/embed`. Sends `{"model", "input"}` and accepts `data[0].embedding`,
/// `embeddings[0]` or `embedding` in the reply.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        timeout: Duration,
    ) -> Result<Self, RetrievalError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| RetrievalError::Embedding(e.to_string()))?;
        Ok(Self { endpoint: endpoint.into(), model: model.into(), client })
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<Vector, RetrievalError> {
        if text.trim().is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        let err = |e: String| RetrievalError::Embedding(e);
        let resp = self
            .client
            .post(&self.endpoint)
            .json(&json!({ "model": self.model, "input": text }))
            .send()
            .map_err(|e| err(e.to_string()))?;
        let status = resp.status();
        let body: Value = resp.json().map_err(|e| err(e.to_string()))?;
        if !status.is_success() {
            return Err(err(format!("HTTP {status}: {body}")));
        }
        let vector = body
            .pointer("/data/0/embedding")
            .or_else(|| body.pointer("/embeddings/0"))
            .or_else(|| body.get("embedding"))
            .and_then(Value::as_array)
            .ok_or_else(|| err("response has no embedding".into()))?;
        vector.iter().map(|x| x.as_f64().ok_or_else(|| err("non-numeric embedding component".into()))).collect()
    }

    fn describe(&self) -> String {
        format!("{} ({})", self.endpoint, self.model)
    }
}

/// Writes the offline vector file for `texts` using any embedder.
pub fn export_vectors<'a>(
    embedder: &dyn Embedder,
    texts: impl IntoIterator<Item = &'a str>,
) -> Result<String, RetrievalError> {
    let mut map = std::collections::BTreeMap::new();
    for text in texts {
        if !map.contains_key(text) {
            map.insert(text.to_string(), embedder.embed(text)?);
        }
    }
    let mut out = serde_json::to_string_pretty(&map).expect("vectors serialize");
    out.push('\n');
    Ok(out)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, RetrievalError> {
    if a.len() != b.len() {
        return Err(RetrievalError::DimensionMismatch { expected: a.len(), found: b.len() });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedExample {
    pub item: QuestionItem,
    pub vector: Vector,
}

/// An immutable pool of embedded examples of one kind.
#[derive(Debug, Clone)]
pub struct ExampleStore {
    pool_kind: Label,
    entries: Vec<EmbeddedExample>,
    dimension: usize,
}

impl ExampleStore {
    pub fn new(pool_kind: Label, entries: Vec<EmbeddedExample>) -> Result<Self, RetrievalError> {
        let dimension = entries.first().map_or(0, |e| e.vector.len());
        for entry in &entries {
            if entry.item.label() != pool_kind {
                return Err(RetrievalError::InvalidStore(format!(
                    "item `{}` does not belong in the {pool_kind:?} pool",
                    entry.item.id
                )));
            }
            if entry.vector.len() != dimension {
                return Err(RetrievalError::DimensionMismatch { expected: dimension, found: entry.vector.len() });
            }
            if norm(&entry.vector) == 0.0 {
                return Err(RetrievalError::ZeroVector);
            }
        }
        if !entries.is_empty() && dimension == 0 {
            return Err(RetrievalError::InvalidStore("empty vectors".into()));
        }
        Ok(Self { pool_kind, entries, dimension })
    }

    pub fn build(pool_kind: Label, items: &[QuestionItem], embedder: &dyn Embedder) -> Result<Self, RetrievalError> {
        let entries = items
            .iter()
            .map(|item| Ok(EmbeddedExample { item: item.clone(), vector: embedder.embed(&item.question)? }))
            .collect::<Result<Vec<_>, RetrievalError>>()?;
        Self::new(pool_kind, entries)
    }

    pub fn pool_kind(&self) -> Label {
        self.pool_kind
    }

    pub fn entries(&self) -> &[EmbeddedExample] {
        &self.entries
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// The `k` most similar items, most similar first, skipping `exclude_id`.
/// Equal similarities keep store order.
pub fn top_k_similar<'s>(
    query: &[f64],
    store: &'s ExampleStore,
    k: usize,
    exclude_id: Option<&str>,
) -> Result<Vec<&'s QuestionItem>, RetrievalError> {
    if k == 0 || store.is_empty() {
        return Ok(Vec::new());
    }
    if query.len() != store.dimension {
        return Err(RetrievalError::DimensionMismatch { expected: store.dimension, found: query.len() });
    }
    let mut scored = Vec::with_capacity(store.len());
    for (index, entry) in store.entries.iter().enumerate() {
        if exclude_id == Some(entry.item.id.as_str()) {
            continue;
        }
        scored.push((cosine_similarity(query, &entry.vector)?, index));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, i)| &store.entries[i].item).collect())
}

/// Embedder plus the two example pools consulted when building prompts.
#[derive(Clone)]
pub struct Retriever {
    embedder: Arc<dyn Embedder>,
    answerable: Option<ExampleStore>,
    unanswerable: Option<ExampleStore>,
}

impl std::fmt::Debug for Retriever {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Retriever")
            .field("embedder", &self.embedder.describe())
            .field("answerable", &self.answerable.as_ref().map(ExampleStore::len))
            .field("unanswerable", &self.unanswerable.as_ref().map(ExampleStore::len))
            .finish()
    }
}

impl Retriever {
    pub fn new(
        embedder: Arc<dyn Embedder>,
        answerable: Option<ExampleStore>,
        unanswerable: Option<ExampleStore>,
    ) -> Self {
        Self { embedder, answerable, unanswerable }
    }

    /// Embeds both pools with `embedder`.
    pub fn build(
        embedder: Arc<dyn Embedder>,
        seed: &[QuestionItem],
        naq: &[QuestionItem],
    ) -> Result<Self, RetrievalError> {
        let answerable = ExampleStore::build(Label::Answerable, seed, embedder.as_ref())?;
        let unanswerable = ExampleStore::build(Label::Unanswerable, naq, embedder.as_ref())?;
        Ok(Self::new(embedder, Some(answerable), Some(unanswerable)))
    }

    pub fn embed(&self, text: &str) -> Result<Vector, RetrievalError> {
        self.embedder.embed(text)
    }

    pub fn store(&self, kind: Label) -> Option<&ExampleStore> {
        match kind {
            Label::Answerable => self.answerable.as_ref(),
            Label::Unanswerable => self.unanswerable.as_ref(),
        }
    }

    pub fn top_k(
        &self,
        kind: Label,
        query: &[f64],
        k: usize,
        exclude_id: Option<&str>,
    ) -> Result<Vec<&QuestionItem>, RetrievalError> {
        match self.store(kind) {
            Some(store) => top_k_similar(query, store, k, exclude_id),
            None if k == 0 => Ok(Vec::new()),
            None => Err(RetrievalError::InvalidStore(format!("no {kind:?} example pool loaded"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str) -> QuestionItem {
        QuestionItem::answerable(id, format!("question {id}"), "select 1")
    }

    fn store() -> ExampleStore {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        ExampleStore::new(
            Label::Answerable,
            vec![
                EmbeddedExample { item: item("a"), vector: vec![1.0, 0.0] },
                EmbeddedExample { item: item("b"), vector: vec![0.0, 1.0] },
                EmbeddedExample { item: item("c"), vector: vec![s, s] },
            ],
        )
        .unwrap()
    }

    fn ids(items: Vec<&QuestionItem>) -> Vec<&str> {
        items.into_iter().map(|i| i.id.as_str()).collect()
    }

    #[test]
    fn cosine_hand_values() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 32 / (sqrt(14) * sqrt(77))
        let v = cosine_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((v - 0.9746318).abs() < 1e-6, "{v}");
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(RetrievalError::DimensionMismatch { expected: 1, found: 2 })
        );
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]), Err(RetrievalError::ZeroVector));
    }

    #[test]
    fn ranking_examples() {
        let store = store();
        assert_eq!(ids(top_k_similar(&[1.0, 0.0], &store, 2, None).unwrap()), ["a", "c"]);
        assert_eq!(ids(top_k_similar(&[1.0, 0.0], &store, 2, Some("a")).unwrap()), ["c", "b"]);
        assert!(top_k_similar(&[1.0, 0.0], &store, 0, None).unwrap().is_empty());
        assert_eq!(top_k_similar(&[1.0, 0.0], &store, 10, Some("b")).unwrap().len(), 2);
    }

    #[test]
    fn ties_keep_store_order() {
        let store = ExampleStore::new(
            Label::Answerable,
            ["x", "y", "z"].iter().map(|id| EmbeddedExample { item: item(id), vector: vec![1.0, 1.0] }).collect(),
        )
        .unwrap();
        assert_eq!(ids(top_k_similar(&[1.0, 1.0], &store, 3, None).unwrap()), ["x", "y", "z"]);
    }

    #[test]
    fn query_dimension_checked() {
        assert!(matches!(
            top_k_similar(&[1.0, 0.0, 0.0], &store(), 1, None),
            Err(RetrievalError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn store_rejects_mixed_kinds_and_zero_vectors() {
        let naq = QuestionItem::unanswerable("n", "q", crate::dataset::NaqCategory::NonSql);
        assert!(ExampleStore::new(Label::Answerable, vec![EmbeddedExample { item: naq, vector: vec![1.0] }]).is_err());
        assert_eq!(
            ExampleStore::new(Label::Answerable, vec![EmbeddedExample { item: item("a"), vector: vec![0.0] }])
                .unwrap_err(),
            RetrievalError::ZeroVector
        );
    }

    #[test]
    fn offline_lookup() {
        let emb = OfflineEmbedder::new(HashMap::from([("q1".to_string(), vec![1.0, 0.0])]));
        assert_eq!(emb.embed("q1").unwrap(), vec![1.0, 0.0]);
        assert_eq!(emb.embed("q2"), Err(RetrievalError::MissingVector("q2".into())));
    }

    #[test]
    fn hashing_embedder_is_deterministic_and_similarity_aware() {
        let emb = HashingEmbedder::default();
        let a = emb.embed("Show all disease mutations with ref_aa E").unwrap();
        assert_eq!(a, emb.embed("Show all disease mutations with ref_aa E").unwrap());
        let near = emb.embed("show disease mutations with ref_aa K").unwrap();
        let far = emb.embed("Which biomarkers are approved by the FDA?").unwrap();
        assert!(cosine_similarity(&a, &near).unwrap() > cosine_similarity(&a, &far).unwrap());
        assert_eq!(emb.embed("  ?? "), Err(RetrievalError::EmptyText));
    }
}
