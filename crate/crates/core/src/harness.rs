//! Running a dataset through the pipeline and scoring the result.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{build_gold_cache, GoldResultCache, QuestionItem};
use crate::metrics::{evaluate_dataset, write_report, Aggregates, EvalReport, MetricsError, RunConfig};
use crate::parallel_map;
use crate::pipeline::{Pipeline, PipelineError, PipelineOptions, PipelineOutcome};
use crate::prompt::{PromptConfig, Question};
use crate::setup::SetupError;

pub type Outcomes = HashMap<String, Result<PipelineOutcome, PipelineError>>;

/// Answers every item, in id order. Scripted providers replay responses in
/// call order, so they are driven sequentially; live endpoints run on up to
/// `workers` threads (further bounded by the client's in-flight limit).
pub fn run_questions(
    pipeline: &Pipeline,
    items: &[QuestionItem],
    config: &PromptConfig,
    options: PipelineOptions,
    workers: usize,
) -> Outcomes {
    let mut sorted: Vec<&QuestionItem> = items.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let workers = if pipeline.llm.is_order_dependent() { 1 } else { workers };
    let results = parallel_map(&sorted, workers, |item| {
        let outcome = pipeline.answer_question(&Question::from(*item), config, options);
        if let Err(err) = &outcome {
            log::warn!("question {} failed: {err}", item.id);
        }
        outcome
    });
    sorted.iter().map(|item| item.id.clone()).zip(results).collect()
}

/// Runs and scores one prompt regime. Enrichment is always off here.
pub fn evaluate_regime(
    pipeline: &Pipeline,
    items: &[QuestionItem],
    gold_cache: &GoldResultCache,
    config: &PromptConfig,
    correction_loop: bool,
    workers: usize,
) -> Result<(EvalReport, Outcomes), MetricsError> {
    let options = PipelineOptions { correction_loop, ui_mode: false };
    let outcomes = run_questions(pipeline, items, config, options, workers);
    let report = evaluate_dataset(items, &outcomes, gold_cache, RunConfig::new(*config, options, &pipeline.model))?;
    Ok((report, outcomes))
}

/// Parses `all` (the standard grid) or a comma-separated list of regimes.
pub fn parse_regimes(spec: &str) -> Result<Vec<PromptConfig>, SetupError> {
    if spec.trim() == "all" {
        return Ok(PromptConfig::standard_grid());
    }
    spec.split(',').map(|r| r.trim().parse().map_err(|e| SetupError(format!("regime `{r}`: {e}")))).collect()
}

/// Loads the gold cache from `path` when it exists, otherwise builds it
/// (and saves it to `path` if one was given).
pub fn gold_cache_for(
    pipeline: &Pipeline,
    items: &[QuestionItem],
    path: Option<&Path>,
    workers: usize,
) -> Result<GoldResultCache, SetupError> {
    if let Some(path) = path.filter(|p| p.exists()) {
        return GoldResultCache::load(path).map_err(|e| SetupError(format!("gold cache: {e}")));
    }
    let cache =
        build_gold_cache(items, &pipeline.executor, workers).map_err(|e| SetupError(format!("gold cache: {e}")))?;
    if let Some(path) = path {
        cache.save(path).map_err(|e| SetupError(format!("gold cache: {e}")))?;
    }
    Ok(cache)
}

/// Evaluates every regime in turn over the same items.
pub fn evaluate_regimes(
    pipeline: &Pipeline,
    items: &[QuestionItem],
    gold_cache: &GoldResultCache,
    regimes: &[PromptConfig],
    correction_loop: bool,
    workers: usize,
) -> Result<Vec<EvalReport>, MetricsError> {
    regimes
        .iter()
        .map(|config| evaluate_regime(pipeline, items, gold_cache, config, correction_loop, workers).map(|(r, _)| r))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub regime: String,
    pub report: PathBuf,
    pub aggregates: Aggregates,
}

/// One report writes to `out` (plus `.csv`). Several write
/// `<stem>.<regime>.json/.csv` next to `out`, and `out` itself becomes a
/// summary of every regime's aggregates.
pub fn write_reports(reports: &[EvalReport], out: &Path) -> Result<Vec<PathBuf>, MetricsError> {
    if let [report] = reports {
        let csv = write_report(report, out)?;
        return Ok(vec![out.to_path_buf(), csv]);
    }
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let dir = out.parent().unwrap_or(Path::new(""));
    let mut written = Vec::new();
    let mut summary: BTreeMap<String, RegimeSummary> = BTreeMap::new();
    for report in reports {
        let path = dir.join(format!("{stem}.{}.json", report.config.regime));
        let csv = write_report(report, &path)?;
        summary.insert(
            report.config.regime.clone(),
            RegimeSummary {
                regime: report.config.regime.clone(),
                report: PathBuf::from(path.file_name().expect("file name")),
                aggregates: report.aggregates.clone(),
            },
        );
        written.extend([path, csv]);
    }
    let mut text = serde_json::to_string_pretty(&summary.into_values().collect::<Vec<_>>())
        .map_err(|e| MetricsError::Encode(e.to_string()))?;
    text.push('\n');
    std::fs::write(out, text).map_err(|source| MetricsError::Io { path: out.into(), source })?;
    written.push(out.to_path_buf());
    Ok(written)
}
