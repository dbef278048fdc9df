use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use carefulsql_cli::server;
use carefulsql_core::dataset::{dataset_stats, generate_naq_candidates, load_questions, NaqCategory, QuestionItem};
use carefulsql_core::harness::{evaluate_regimes, gold_cache_for, parse_regimes, write_reports};
use carefulsql_core::pipeline::{PipelineOptions, PipelineVerdict};
use carefulsql_core::prompt::{ExampleSelection, PromptConfig, Question};
use carefulsql_core::retriever::export_vectors;
use carefulsql_core::schema::load_schema;
use carefulsql_core::service::{Service, TranscriptStore};
use carefulsql_core::setup::AppConfig;

const ASK_PREVIEW_ROWS: usize = 20;

#[derive(Debug, Parser)]
#[command(name = "carefulsql", version, about = "Abstention-aware natural-language to SQL")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

/// Overrides for settings that are otherwise read from the config file.
#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML or JSON settings file.
    #[arg(long, global = true, value_name = "FILE")]
    config_file: Option<PathBuf>,
    /// SQLite file, `.sql` dump, or postgres:// URL.
    #[arg(long, global = true)]
    db: Option<String>,
    /// Schema description JSON.
    #[arg(long, global = true)]
    schema: Option<PathBuf>,
    /// Answerable example pool.
    #[arg(long, global = true)]
    seed_pool: Option<PathBuf>,
    /// Unanswerable example pool.
    #[arg(long, global = true)]
    naq_pool: Option<PathBuf>,
    /// `scripted:<file>` or a chat-completions URL.
    #[arg(long, global = true)]
    llm: Option<String>,
    /// `hashing[:dim]`, an offline vectors file, or an embeddings URL.
    #[arg(long, global = true)]
    embeddings: Option<String>,
    /// Model name sent to the LLM endpoint.
    #[arg(long, global = true)]
    model: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long)]
        no_correction: bool,
    },
    /// Answer one question.
    Ask {
        question: String,
        #[command(flatten)]
        regime: RegimeArgs,
        #[arg(long)]
        no_correction: bool,
        /// Also ask for an abstention explanation or a short answer.
        #[arg(long)]
        ui_mode: bool,
    },
    /// Run a dataset through one or more prompt regimes and write a report.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        naq: Option<PathBuf>,
        /// Regime such as `nar-both-5`, a comma-separated list, or `all`.
        #[arg(long)]
        config: Option<String>,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        /// Gold results; loaded when present, otherwise built and saved here.
        #[arg(long)]
        gold_cache: Option<PathBuf>,
        #[arg(long)]
        no_correction: bool,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Execute every gold query once and store the results.
    BuildCache {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ask the model for unanswerable-question candidates.
    GenerateNaq {
        /// One category (e.g. `values_missing`); all when omitted.
        #[arg(long)]
        category: Option<NaqCategory>,
        #[arg(short, long, default_value_t = 10)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print a numbered list for manual curation instead of JSON.
        #[arg(long)]
        review: bool,
    },
    /// Write an offline vectors file for the questions in the given files.
    Embed {
        #[arg(required = true)]
        questions: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct RegimeArgs {
    /// Include the no-answer rules.
    #[arg(long)]
    nar: bool,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    examples: Option<ExampleSelection>,
}

impl RegimeArgs {
    /// None when no flag was given, so the configured regime applies.
    fn prompt_config(&self) -> Result<Option<PromptConfig>> {
        if !self.nar && self.shots.is_none() && self.examples.is_none() {
            return Ok(None);
        }
        let shots = self.shots.unwrap_or(0);
        let default_examples = if shots == 0 { ExampleSelection::None } else { ExampleSelection::Both };
        let config = PromptConfig::new(shots, self.nar, self.examples.unwrap_or(default_examples))?;
        Ok(Some(config))
    }
}

fn load_config(args: &GlobalArgs) -> Result<AppConfig> {
    let mut config = match &args.config_file {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    if let Some(db) = &args.db {
        config.database = Some(db.clone());
    }
    if let Some(schema) = &args.schema {
        config.schema = Some(schema.clone());
    }
    if let Some(seed) = &args.seed_pool {
        config.seed = Some(seed.clone());
    }
    if let Some(naq) = &args.naq_pool {
        config.naq = Some(naq.clone());
    }
    if let Some(llm) = &args.llm {
        config.llm = Some(llm.clone());
    }
    if let Some(embeddings) = &args.embeddings {
        config.embeddings = embeddings.clone();
    }
    if let Some(model) = &args.model {
        config.models.retain(|m| m != model);
        config.models.insert(0, model.clone());
    }
    Ok(config)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let config = load_config(&cli.global)?;
    match cli.command {
        Command::Serve { addr, no_correction } => serve(&config, addr, !no_correction),
        Command::Ask { question, regime, no_correction, ui_mode } => {
            let prompt = match regime.prompt_config()? {
                Some(prompt) => prompt,
                None => config.prompt_config()?,
            };
            ask(&config, &question, prompt, PipelineOptions { correction_loop: !no_correction, ui_mode })
        }
        Command::Evaluate { dataset, naq, config: regimes, out, gold_cache, no_correction, workers } => {
            let regimes = regimes.unwrap_or_else(|| config.regime.clone());
            let workers = workers.unwrap_or(config.workers);
            evaluate(&config, &dataset, naq.as_deref(), &regimes, &out, gold_cache.as_deref(), !no_correction, workers)
        }
        Command::BuildCache { dataset, out } => build_cache(&config, &dataset, &out),
        Command::GenerateNaq { category, n, out, review } => generate_naq(&config, category, n, out.as_deref(), review),
        Command::Embed { questions, out } => embed(&config, &questions, &out),
    }
}

fn serve(config: &AppConfig, addr: SocketAddr, correction_loop: bool) -> Result<()> {
    let service = Service {
        pipeline: config.pipeline()?,
        models: config.models(),
        default_config: config.prompt_config()?,
        correction_loop,
        transcripts: TranscriptStore::new(&config.transcripts_dir),
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(server::serve(Arc::new(service), addr))?;
    Ok(())
}

fn ask(config: &AppConfig, question: &str, prompt: PromptConfig, options: PipelineOptions) -> Result<()> {
    let pipeline = config.pipeline()?;
    let outcome = pipeline.answer_question(&Question::adhoc(question), &prompt, options)?;
    let store = TranscriptStore::new(&config.transcripts_dir);
    let id = store.save(&outcome).context("saving transcript")?;

    println!("regime: {prompt}");
    println!("verdict: {}", outcome.verdict.name());
    if let Some(sql) = outcome.verdict.sql() {
        println!("sql: {sql}");
    }
    match &outcome.verdict {
        PipelineVerdict::Executed { table, .. } => {
            println!("rows: {}", table.rows.len());
            println!("{}", table.columns.join("\t"));
            for row in table.rows.iter().take(ASK_PREVIEW_ROWS) {
                println!("{}", row.iter().map(ToString::to_string).collect::<Vec<_>>().join("\t"));
            }
            if table.rows.len() > ASK_PREVIEW_ROWS {
                println!("... {} more rows", table.rows.len() - ASK_PREVIEW_ROWS);
            }
        }
        PipelineVerdict::DbFailed { error, .. } => println!("error: {error}"),
        PipelineVerdict::Abstained { .. } | PipelineVerdict::Unusable { .. } => {}
    }
    if let Some(answer) = &outcome.short_answer {
        println!("answer: {answer}");
    }
    if let Some(explanation) = &outcome.explanation {
        println!("explanation: {explanation}");
    }
    println!("transcript: {}", store.path_for(&id).expect("saved id").display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    config: &AppConfig,
    dataset: &Path,
    naq: Option<&Path>,
    regimes: &str,
    out: &Path,
    gold_cache: Option<&Path>,
    correction_loop: bool,
    workers: usize,
) -> Result<()> {
    let regimes = parse_regimes(regimes)?;
    let mut items = load_questions(dataset)?;
    if let Some(naq) = naq {
        items.extend(load_questions(naq)?);
    }
    let mut ids = std::collections::HashSet::new();
    if let Some(dup) = items.iter().find(|item| !ids.insert(item.id.as_str())) {
        bail!("duplicate question id `{}` across dataset files", dup.id);
    }
    let pipeline = config.pipeline()?;
    let cache = gold_cache_for(&pipeline, &items, gold_cache, workers)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let reports = evaluate_regimes(&pipeline, &items, &cache, &regimes, correction_loop, workers)?;
    for report in &reports {
        let a = &report.aggregates;
        println!(
            "{}: result_acc_soft={} result_acc_exact={} naq_detection_acc={} false_abstention={} infra_failures={}",
            report.config.regime,
            rate(a.result_acc_soft),
            rate(a.result_acc_exact),
            rate(a.naq_detection_acc),
            rate(a.false_abstention_rate_on_answerable),
            a.infra_failures
        );
    }
    for path in write_reports(&reports, out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn rate(value: Option<f64>) -> String {
    value.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn build_cache(config: &AppConfig, dataset: &Path, out: &Path) -> Result<()> {
    let items = load_questions(dataset)?;
    let cache = gold_cache_for_executor(config, &items)?;
    cache.save(out)?;
    let failed = items.iter().filter_map(|i| cache.get(&i.id)).filter(|e| e.table().is_none()).count();
    println!("cached {} gold results ({failed} failed) in {}", cache.len(), out.display());
    Ok(())
}

fn gold_cache_for_executor(
    config: &AppConfig,
    items: &[QuestionItem],
) -> Result<carefulsql_core::dataset::GoldResultCache> {
    let executor = config.executor()?;
    Ok(carefulsql_core::dataset::build_gold_cache(items, &executor, config.workers)?)
}

fn generate_naq(
    config: &AppConfig,
    category: Option<NaqCategory>,
    n: usize,
    out: Option<&Path>,
    review: bool,
) -> Result<()> {
    let schema_path = config.schema.as_ref().context("`schema` is not configured")?;
    let schema = load_schema(schema_path)?;
    let llm = config.llm_client()?;
    let model = config.default_model();
    let categories = match category {
        Some(c) => vec![c],
        None => NaqCategory::ALL.to_vec(),
    };
    let mut batches = Vec::new();
    for category in categories {
        batches.push(generate_naq_candidates(&schema, category, n, &llm, &model)?);
    }
    if review {
        for batch in &batches {
            println!("## {} (review before use)", batch.category);
            for (k, candidate) in batch.candidates.iter().enumerate() {
                println!("{:>3}. {candidate}", k + 1);
            }
        }
    }
    let json = serde_json::to_string_pretty(&batches)? + "\n";
    match out {
        Some(path) => std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?,
        None if !review => print!("{json}"),
        None => {}
    }
    Ok(())
}

fn embed(config: &AppConfig, files: &[PathBuf], out: &Path) -> Result<()> {
    let mut items = Vec::new();
    for file in files {
        items.extend(load_questions(file)?);
    }
    let embedder = config.embedder()?;
    let text = export_vectors(embedder.as_ref(), items.iter().map(|i| i.question.as_str()))?;
    std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    let stats = dataset_stats(&items);
    println!(
        "embedded {} questions ({} answerable, {} unanswerable) with {} into {}",
        items.len(),
        stats.answerable,
        stats.unanswerable,
        embedder.describe(),
        out.display()
    );
    Ok(())
}
