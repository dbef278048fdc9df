//! Scoring: SQL exact match, result accuracy tiers and unanswerable-question
//! detection, aggregated into an [`EvalReport`].

mod compare;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{GoldResultCache, Label, NaqCategory, QuestionItem};
use crate::pipeline::{PipelineError, PipelineOptions, PipelineOutcome, PipelineVerdict};
use crate::prompt::PromptConfig;
use crate::sqltext::normalize_sql;

pub use self::compare::{
    cells_match, compare_results, numbers_close, soft_equivalent, tables_exactly_equal, ResultComparison,
    NUMERIC_TOLERANCE,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no outcome for question `{0}`")]
    MissingOutcome(String),
    #[error("no gold result cached for answerable question `{0}`")]
    MissingGold(String),
    #[error("cannot write report {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot encode report: {0}")]
    Encode(String),
    #[error("cannot parse report: {0}")]
    Parse(#[from] serde_json::Error),
}

pub fn sql_exact_match(pred_sql: &str, gold_sql: &str) -> bool {
    normalize_sql(pred_sql) == normalize_sql(gold_sql)
}

/// `Some(true)` when an unanswerable item was declined; `None` for
/// answerable items, which are scored by [`is_false_abstention`] instead.
pub fn score_unanswerable(verdict: &PipelineVerdict, item: &QuestionItem) -> Option<bool> {
    (!item.is_answerable()).then(|| verdict.is_abstained())
}

pub fn is_false_abstention(verdict: &PipelineVerdict, item: &QuestionItem) -> bool {
    item.is_answerable() && verdict.is_abstained()
}

/// What the run was configured with, echoed into the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub regime: String,
    pub prompt: PromptConfig,
    pub options: PipelineOptions,
    pub model: String,
}

impl RunConfig {
    pub fn new(prompt: PromptConfig, options: PipelineOptions, model: impl Into<String>) -> Self {
        Self { regime: prompt.to_string(), prompt, options, model: model.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub schema_version: u32,
    pub sql_normalization: String,
    pub identifier_columns: String,
    pub numeric_tolerance: f64,
    pub examples_per_pool: usize,
    pub notes: Vec<String>,
}

impl ReportMetadata {
    fn for_config(config: &RunConfig) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            sql_normalization: "lowercase; whitespace runs collapsed to one space; trailing semicolons and spaces stripped"
                .into(),
            identifier_columns: "columns named id or *_id are dropped from both predicted and gold tables before soft comparison"
                .into(),
            numeric_tolerance: NUMERIC_TOLERANCE,
            examples_per_pool: config.prompt.shots,
            notes: vec![
                "accuracies exclude questions whose run failed at the LLM layer (see infra_failures)".into(),
                "result accuracies and exact match are over answerable questions; a failed gold query counts as incorrect"
                    .into(),
                "db_error_rate is over answerable questions whose verdict carried SQL".into(),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub label: Label,
    pub category: Option<NaqCategory>,
    pub verdict: String,
    pub sql: Option<String>,
    pub sql_exact_match: Option<bool>,
    pub result_comparison: Option<ResultComparison>,
    pub naq_detected: Option<bool>,
    pub false_abstention: Option<bool>,
    pub reprompts_used: Option<usize>,
    pub corrections_used: Option<usize>,
    pub infra_failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub total: usize,
    pub detected: usize,
    pub acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub answerable_scored: usize,
    pub unanswerable_scored: usize,
    pub sql_exact_match_acc: Option<f64>,
    pub result_acc_exact: Option<f64>,
    pub result_acc_soft: Option<f64>,
    pub db_error_rate: Option<f64>,
    pub db_error_denominator: usize,
    pub naq_detection_acc: Option<f64>,
    pub naq_detection_by_category: BTreeMap<NaqCategory, CategoryScore>,
    pub false_abstention_rate_on_answerable: Option<f64>,
    pub infra_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: RunConfig,
    pub metadata: ReportMetadata,
    pub aggregates: Aggregates,
    pub per_question: Vec<QuestionRecord>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Scores every item against its outcome. Items are reported in id order.
pub fn evaluate_dataset(
    items: &[QuestionItem],
    outcomes: &HashMap<String, Result<PipelineOutcome, PipelineError>>,
    gold_cache: &GoldResultCache,
    config: RunConfig,
) -> Result<EvalReport, MetricsError> {
    let mut sorted: Vec<&QuestionItem> = items.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));

    let mut per_question = Vec::with_capacity(items.len());
    for item in sorted {
        let outcome = outcomes.get(&item.id).ok_or_else(|| MetricsError::MissingOutcome(item.id.clone()))?;
        per_question.push(score_item(item, outcome, gold_cache)?);
    }
    let aggregates = aggregate(&per_question);
    Ok(EvalReport { metadata: ReportMetadata::for_config(&config), config, aggregates, per_question })
}

fn score_item(
    item: &QuestionItem,
    outcome: &Result<PipelineOutcome, PipelineError>,
    gold_cache: &GoldResultCache,
) -> Result<QuestionRecord, MetricsError> {
    let mut record = QuestionRecord {
        id: item.id.clone(),
        label: item.label(),
        category: item.category(),
        verdict: "infra_failure".into(),
        sql: None,
        sql_exact_match: None,
        result_comparison: None,
        naq_detected: None,
        false_abstention: None,
        reprompts_used: None,
        corrections_used: None,
        infra_failure: None,
    };
    let outcome = match outcome {
        Ok(outcome) => outcome,
        Err(err) => {
            record.infra_failure = Some(err.to_string());
            return Ok(record);
        }
    };
    let verdict = &outcome.verdict;
    record.verdict = verdict.name().into();
    record.sql = verdict.sql().map(str::to_string);
    record.reprompts_used = Some(outcome.reprompts_used);
    record.corrections_used = Some(outcome.corrections_used);
    record.naq_detected = score_unanswerable(verdict, item);

    if let Some(gold_sql) = item.gold_sql() {
        let gold = gold_cache.get(&item.id).ok_or_else(|| MetricsError::MissingGold(item.id.clone()))?;
        record.false_abstention = Some(is_false_abstention(verdict, item));
        record.sql_exact_match = Some(verdict.sql().is_some_and(|sql| sql_exact_match(sql, gold_sql)));
        record.result_comparison = Some(match (verdict, gold.table()) {
            (PipelineVerdict::DbFailed { .. }, _) => ResultComparison::DbError,
            (PipelineVerdict::Executed { table, .. }, Some(gold_table)) => compare_results(Ok(table), &gold_table),
            _ => ResultComparison::Incorrect,
        });
    }
    Ok(record)
}

fn aggregate(records: &[QuestionRecord]) -> Aggregates {
    let scored: Vec<&QuestionRecord> = records.iter().filter(|r| r.infra_failure.is_none()).collect();
    let answerable: Vec<&&QuestionRecord> = scored.iter().filter(|r| r.label == Label::Answerable).collect();
    let unanswerable: Vec<&&QuestionRecord> = scored.iter().filter(|r| r.label == Label::Unanswerable).collect();

    let count = |rs: &[&&QuestionRecord], pred: &dyn Fn(&QuestionRecord) -> bool| rs.iter().filter(|r| pred(r)).count();
    let exact_sql = count(&answerable, &|r| r.sql_exact_match == Some(true));
    let exact = count(&answerable, &|r| r.result_comparison.is_some_and(ResultComparison::is_exact));
    let soft = count(&answerable, &|r| r.result_comparison.is_some_and(ResultComparison::is_soft_or_better));
    let with_sql = count(&answerable, &|r| r.sql.is_some());
    let db_errors = count(&answerable, &|r| r.result_comparison == Some(ResultComparison::DbError));
    let false_abstentions = count(&answerable, &|r| r.false_abstention == Some(true));
    let detected = count(&unanswerable, &|r| r.naq_detected == Some(true));

    let mut by_category: BTreeMap<NaqCategory, CategoryScore> = BTreeMap::new();
    for record in &unanswerable {
        let Some(category) = record.category else { continue };
        let score = by_category.entry(category).or_insert(CategoryScore { total: 0, detected: 0, acc: None });
        score.total += 1;
        score.detected += usize::from(record.naq_detected == Some(true));
    }
    for score in by_category.values_mut() {
        score.acc = ratio(score.detected, score.total);
    }

    Aggregates {
        answerable_scored: answerable.len(),
        unanswerable_scored: unanswerable.len(),
        sql_exact_match_acc: ratio(exact_sql, answerable.len()),
        result_acc_exact: ratio(exact, answerable.len()),
        result_acc_soft: ratio(soft, answerable.len()),
        db_error_rate: ratio(db_errors, with_sql),
        db_error_denominator: with_sql,
        naq_detection_acc: ratio(detected, unanswerable.len()),
        naq_detection_by_category: by_category,
        false_abstention_rate_on_answerable: ratio(false_abstentions, answerable.len()),
        infra_failures: records.len() - scored.len(),
    }
}

pub fn report_to_json(report: &EvalReport) -> Result<String, MetricsError> {
    let mut text = serde_json::to_string_pretty(report).map_err(|e| MetricsError::Encode(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn report_to_csv(report: &EvalReport) -> Result<String, MetricsError> {
    fn opt<T: ToString>(v: &Option<T>) -> String {
        v.as_ref().map(ToString::to_string).unwrap_or_default()
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    let encode = |e: csv::Error| MetricsError::Encode(e.to_string());
    writer
        .write_record([
            "id",
            "label",
            "category",
            "verdict",
            "sql_exact_match",
            "result_comparison",
            "naq_detected",
            "false_abstention",
            "reprompts_used",
            "corrections_used",
            "infra_failure",
            "sql",
        ])
        .map_err(encode)?;
    for r in &report.per_question {
        writer
            .write_record([
                r.id.clone(),
                r.label.as_str().to_string(),
                r.category.map(|c| c.as_str().to_string()).unwrap_or_default(),
                r.verdict.clone(),
                opt(&r.sql_exact_match),
                r.result_comparison.map(|c| c.as_str().to_string()).unwrap_or_default(),
                opt(&r.naq_detected),
                opt(&r.false_abstention),
                opt(&r.reprompts_used),
                opt(&r.corrections_used),
                opt(&r.infra_failure),
                opt(&r.sql),
            ])
            .map_err(encode)?;
    }
    let bytes = writer.into_inner().map_err(|e| MetricsError::Encode(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| MetricsError::Encode(e.to_string()))
}

/// Writes `path` (JSON) and the same path with a `.csv` extension.
/// Returns the CSV path.
pub fn write_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<PathBuf, MetricsError> {
    let path = path.as_ref();
    let csv_path = path.with_extension("csv");
    let write = |p: &Path, text: String| {
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|source| MetricsError::Io { path: parent.into(), source })?;
        }
        fs::write(p, text).map_err(|source| MetricsError::Io { path: p.into(), source })
    };
    write(path, report_to_json(report)?)?;
    write(&csv_path, report_to_csv(report)?)?;
    Ok(csv_path)
}

pub fn load_report(path: impl AsRef<Path>) -> Result<EvalReport, MetricsError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| MetricsError::Io { path: path.into(), source })?;
    Ok(serde_json::from_str(&text)?)
}
