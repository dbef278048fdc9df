//! Acceptance suite. Runs as a plain binary (`harness = false`) and prints
//! one PASS/FAIL line per criterion; exits non-zero if any criterion fails.
//!
//!     cargo test -p carefulsql-core --test acceptance
//!
//! The live-model criterion only runs when `CAREFULSQL_LIVE_CONFIG`,
//! `CAREFULSQL_LIVE_DATASET` and `CAREFULSQL_LIVE_NAQ` are set.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use carefulsql_core::dataset::{Label, NaqCategory, QuestionItem};
use carefulsql_core::executor::{file_checksum, Cell, ExecError, ExecErrorKind, ResultTable};
use carefulsql_core::harness::{evaluate_regimes, gold_cache_for, parse_regimes, write_reports};
use carefulsql_core::metrics::{compare_results, soft_equivalent, sql_exact_match, EvalReport, ResultComparison};
use carefulsql_core::pipeline::{PipelineOptions, PipelineVerdict, REPROMPT_MESSAGE};
use carefulsql_core::prompt::{PromptConfig, Question};
use carefulsql_core::retriever::{cosine_similarity, top_k_similar, EmbeddedExample, ExampleStore};
use carefulsql_core::setup::AppConfig;
use carefulsql_core::sqltext::{classify_output, normalize_sql, ModelOutputClass};

const METRICS_TIME_BUDGET: Duration = Duration::from_secs(5);
const DESK_RUN_TIME_BUDGET: Duration = Duration::from_secs(60);
const COSINE_TOLERANCE: f64 = 1e-6;
/// Oracle and library may order near-identical similarities differently.
const RANKING_TIE_TOLERANCE: f64 = 1e-12;
const ORACLE_NUMERIC_TOLERANCE: f64 = 1e-9;
const MAX_PIPELINE_CALLS: usize = 5;

/// Collects failed expectations for one criterion.
#[derive(Default)]
struct Check {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Check {
    fn expect(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }
}

fn run(name: &str, criterion: impl FnOnce(&mut Check)) -> bool {
    let mut check = Check::default();
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(|| criterion(&mut check)));
    if let Err(panic) = outcome {
        let msg = panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        check.failures.push(format!("panicked: {msg}"));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let passed = check.failures.is_empty();
    let status = if passed { "PASS" } else { "FAIL" };
    println!("{status} {name} [{elapsed:.2}s] {}", check.notes.join("; "));
    for failure in check.failures.iter().take(20) {
        println!("    - {failure}");
    }
    passed
}

fn main() {
    let results = [
        run("metrics-oracle", metrics_oracle),
        run("state-machine", state_machine),
        run("retriever-oracle", retriever_oracle),
        run("normalization", normalization),
        run("end-to-end-desk-run", desk_run),
        run("safety-read-only", safety),
        live_mode(),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Metrics oracle

fn i(v: i64) -> Cell {
    Cell::Int(v)
}

fn d(v: &str) -> Cell {
    Cell::Decimal(v.into())
}

fn s(v: &str) -> Cell {
    Cell::Text(v.into())
}

fn tbl(cols: &[&str], rows: Vec<Vec<Cell>>) -> ResultTable {
    ResultTable::new(cols.iter().map(|c| c.to_string()).collect(), rows)
}

enum Pred {
    Table(ResultTable),
    Error(ExecError),
}

struct Case {
    name: &'static str,
    pred: Pred,
    gold: ResultTable,
    expected: ResultComparison,
}

fn case(name: &'static str, pred: ResultTable, gold: ResultTable, expected: ResultComparison) -> Case {
    Case { name, pred: Pred::Table(pred), gold, expected }
}

fn handcrafted_cases() -> Vec<Case> {
    use ResultComparison::*;
    let genes = || tbl(&["id", "symbol"], vec![vec![i(1), s("TP53")], vec![i(2), s("EGFR")]]);
    let six_cols = &["a", "b", "c", "e", "f", "g"];
    let six_rows = || -> Vec<Vec<Cell>> {
        (0..5)
            .map(|r| (0..6).map(|c| if c % 2 == 0 { i(r * 10 + c) } else { s(&format!("v{r}{c}")) }).collect())
            .collect()
    };
    let six_shuffled = || {
        let order = [3usize, 0, 5, 1, 4, 2];
        let rows = six_rows();
        tbl(
            &order.map(|c| ["p", "q", "r", "t", "u", "w"][c]),
            rows.iter().rev().map(|row| order.iter().map(|&c| row[c].clone()).collect()).collect(),
        )
    };
    let err = |kind, msg: &str| Pred::Error(ExecError::new(kind, msg));
    vec![
        case("identical single cell", tbl(&["n"], vec![vec![i(1)]]), tbl(&["n"], vec![vec![i(1)]]), ExactMatch),
        case("identical two columns", genes(), genes(), ExactMatch),
        case("identical empty", tbl(&["a"], vec![]), tbl(&["a"], vec![]), ExactMatch),
        case(
            "column name case only",
            tbl(&["Name"], vec![vec![s("lung")]]),
            tbl(&["name"], vec![vec![s("lung")]]),
            ExactMatch,
        ),
        case(
            "decimal renderings agree canonically",
            tbl(&["v"], vec![vec![d("0.30000000000000004")]]),
            tbl(&["v"], vec![vec![d("0.3")]]),
            ExactMatch,
        ),
        case(
            "rows reordered",
            tbl(&["symbol"], vec![vec![s("EGFR")], vec![s("TP53")]]),
            tbl(&["symbol"], vec![vec![s("TP53")], vec![s("EGFR")]]),
            SoftCorrect,
        ),
        case(
            "renamed column",
            tbl(&["gene"], vec![vec![s("TP53")]]),
            tbl(&["symbol"], vec![vec![s("TP53")]]),
            SoftCorrect,
        ),
        case(
            "gold id dropped, renamed, reordered",
            tbl(&["gene_symbol"], vec![vec![s("EGFR")], vec![s("TP53")]]),
            genes(),
            SoftCorrect,
        ),
        case(
            "columns permuted",
            tbl(&["symbol", "n"], vec![vec![s("TP53"), i(3)], vec![s("EGFR"), i(2)]]),
            tbl(&["n", "symbol"], vec![vec![i(3), s("TP53")], vec![i(2), s("EGFR")]]),
            SoftCorrect,
        ),
        case(
            "columns permuted and rows shuffled",
            tbl(&["symbol", "n"], vec![vec![s("EGFR"), i(2)], vec![s("TP53"), i(3)]]),
            tbl(&["n", "symbol"], vec![vec![i(3), s("TP53")], vec![i(2), s("EGFR")]]),
            SoftCorrect,
        ),
        case(
            "predicted extra id column",
            tbl(&["disease_id", "gene"], vec![vec![i(1324), s("EGFR")], vec![i(1324), s("ALK")]]),
            tbl(&["gene_symbol"], vec![vec![s("EGFR")], vec![s("ALK")]]),
            SoftCorrect,
        ),
        case(
            "different identifier columns on each side",
            tbl(&["ID", "name"], vec![vec![i(7), s("lung")]]),
            tbl(&["anatomical_id", "name"], vec![vec![s("UBERON:0002048"), s("lung")]]),
            SoftCorrect,
        ),
        case("int versus decimal", tbl(&["n"], vec![vec![i(3)]]), tbl(&["n"], vec![vec![d("3.0")]]), SoftCorrect),
        case(
            "large values within relative tolerance",
            tbl(&["n"], vec![vec![i(1_000_000_000_000)]]),
            tbl(&["n"], vec![vec![i(1_000_000_000_100)]]),
            SoftCorrect,
        ),
        case(
            "nulls in permuted columns",
            tbl(&["x", "y"], vec![vec![Cell::Null, s("a")], vec![i(1), s("b")]]),
            tbl(&["y", "x"], vec![vec![s("b"), i(1)], vec![s("a"), Cell::Null]]),
            SoftCorrect,
        ),
        case("empty results renamed", tbl(&["a"], vec![]), tbl(&["b"], vec![]), SoftCorrect),
        case(
            "only identifier columns, same row count",
            tbl(&["id"], vec![vec![i(1)], vec![i(2)]]),
            tbl(&["gene_id"], vec![vec![s("g1")], vec![s("g2")]]),
            SoftCorrect,
        ),
        case(
            "twin columns permuted",
            tbl(&["a", "b", "c"], vec![vec![i(1), i(1), s("x")], vec![i(2), i(2), s("y")]]),
            tbl(&["c", "a", "b"], vec![vec![s("y"), i(2), i(2)], vec![s("x"), i(1), i(1)]]),
            SoftCorrect,
        ),
        case("six columns shuffled", six_shuffled(), tbl(six_cols, six_rows()), SoftCorrect),
        case(
            "six columns with one changed cell",
            {
                let mut t = six_shuffled();
                t.rows[2][1] = i(999);
                t
            },
            tbl(six_cols, six_rows()),
            Incorrect,
        ),
        case(
            "numbers outside tolerance",
            tbl(&["v"], vec![vec![d("1.001")]]),
            tbl(&["v"], vec![vec![d("1.0")]]),
            Incorrect,
        ),
        case("text case differs", tbl(&["g"], vec![vec![s("tp53")]]), tbl(&["g"], vec![vec![s("TP53")]]), Incorrect),
        case(
            "missing row",
            tbl(&["g"], vec![vec![s("TP53")]]),
            tbl(&["g"], vec![vec![s("TP53")], vec![s("EGFR")]]),
            Incorrect,
        ),
        case(
            "duplicate multiplicity differs",
            tbl(&["g"], vec![vec![s("A")], vec![s("A")], vec![s("B")]]),
            tbl(&["g"], vec![vec![s("A")], vec![s("B")], vec![s("B")]]),
            Incorrect,
        ),
        case(
            "width mismatch without identifiers",
            tbl(&["a", "b"], vec![vec![i(1), i(1)], vec![i(2), i(2)]]),
            tbl(&["a"], vec![vec![i(1)], vec![i(2)]]),
            Incorrect,
        ),
        case(
            "column multisets agree but rows do not",
            tbl(&["p", "q"], vec![vec![i(1), i(2)], vec![i(2), i(1)]]),
            tbl(&["x", "y"], vec![vec![i(1), i(1)], vec![i(2), i(2)]]),
            Incorrect,
        ),
        case("null versus empty text", tbl(&["a"], vec![vec![Cell::Null]]), tbl(&["a"], vec![vec![s("")]]), Incorrect),
        case("empty prediction", tbl(&["a"], vec![]), tbl(&["a"], vec![vec![i(1)]]), Incorrect),
        case("text versus number", tbl(&["a"], vec![vec![s("3")]]), tbl(&["a"], vec![vec![i(3)]]), Incorrect),
        case("bool versus int", tbl(&["a"], vec![vec![Cell::Bool(true)]]), tbl(&["a"], vec![vec![i(1)]]), Incorrect),
        case("empty tables of different width", tbl(&["a", "b"], vec![]), tbl(&["a"], vec![]), Incorrect),
        Case {
            name: "syntax error",
            pred: err(ExecErrorKind::Syntax, "near \"FORM\": syntax error"),
            gold: genes(),
            expected: DbError,
        },
        Case {
            name: "missing relation",
            pred: err(ExecErrorKind::MissingRelation, "no such table: nope"),
            gold: genes(),
            expected: DbError,
        },
        Case {
            name: "timeout",
            pred: err(ExecErrorKind::Timeout, "query exceeded the timeout"),
            gold: genes(),
            expected: DbError,
        },
    ]
}

fn oracle_is_identifier(name: &str) -> bool {
    let name = name.to_ascii_lowercase();
    name == "id" || name.ends_with("_id")
}

/// (type rank, numeric value, text) for sorting rows in the oracle.
fn oracle_key(cell: &Cell) -> (u8, f64, String) {
    match cell {
        Cell::Null => (0, 0.0, String::new()),
        Cell::Bool(b) => (1, f64::from(u8::from(*b)), String::new()),
        Cell::Int(v) => (2, *v as f64, String::new()),
        Cell::Decimal(v) => (2, v.parse().unwrap_or(f64::NAN), String::new()),
        Cell::Text(t) => (3, 0.0, t.clone()),
    }
}

fn oracle_cells_equal(a: &Cell, b: &Cell) -> bool {
    let (ka, kb) = (oracle_key(a), oracle_key(b));
    match (ka.0, kb.0) {
        (2, 2) => (ka.1 - kb.1).abs() <= ORACLE_NUMERIC_TOLERANCE * 1f64.max(ka.1.abs()).max(kb.1.abs()),
        (x, y) if x == y => a == b,
        _ => false,
    }
}

fn oracle_sorted_rows(rows: Vec<Vec<Cell>>) -> Vec<Vec<Cell>> {
    let mut rows = rows;
    rows.sort_by(|x, y| {
        let kx: Vec<_> = x.iter().map(oracle_key).collect();
        let ky: Vec<_> = y.iter().map(oracle_key).collect();
        kx.partial_cmp(&ky).unwrap_or(std::cmp::Ordering::Equal)
    });
    rows
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Exhaustive search over every column permutation.
fn oracle_soft(a: &ResultTable, b: &ResultTable) -> bool {
    let keep = |t: &ResultTable| -> Vec<usize> {
        (0..t.columns.len()).filter(|&c| !oracle_is_identifier(&t.columns[c])).collect()
    };
    let (ka, kb) = (keep(a), keep(b));
    if ka.len() != kb.len() || a.rows.len() != b.rows.len() {
        return false;
    }
    let project = |t: &ResultTable, cols: &[usize]| -> Vec<Vec<Cell>> {
        t.rows.iter().map(|r| cols.iter().map(|&c| r[c].clone()).collect()).collect()
    };
    let left = oracle_sorted_rows(project(a, &ka));
    permutations(kb.len()).into_iter().any(|perm| {
        let cols: Vec<usize> = perm.iter().map(|&p| kb[p]).collect();
        let right = oracle_sorted_rows(project(b, &cols));
        left.iter().zip(&right).all(|(x, y)| x.iter().zip(y).all(|(p, q)| oracle_cells_equal(p, q)))
    })
}

fn oracle_compare(pred: &Pred, gold: &ResultTable) -> ResultComparison {
    let Pred::Table(pred) = pred else {
        return ResultComparison::DbError;
    };
    let lower = |t: &ResultTable| t.columns.iter().map(|c| c.to_lowercase()).collect::<Vec<_>>();
    let canon =
        |t: &ResultTable| t.rows.iter().map(|r| r.iter().map(Cell::canonical).collect::<Vec<_>>()).collect::<Vec<_>>();
    if lower(pred) == lower(gold) && canon(pred) == canon(gold) {
        ResultComparison::ExactMatch
    } else if oracle_soft(pred, gold) {
        ResultComparison::SoftCorrect
    } else {
        ResultComparison::Incorrect
    }
}

fn random_table_pair(rng: &mut ChaCha8Rng) -> (ResultTable, ResultTable) {
    let width = rng.gen_range(1..=5);
    let rows = rng.gen_range(0..=6);
    let pool = [i(0), i(1), i(2), d("2.5"), s("a"), s("b"), Cell::Null];
    let gold_rows: Vec<Vec<Cell>> =
        (0..rows).map(|_| (0..width).map(|_| pool.choose(rng).unwrap().clone()).collect()).collect();
    let mut cols: Vec<String> = (0..width).map(|c| format!("c{c}")).collect();
    if rng.gen_bool(0.3) {
        cols[0] = "id".into();
    }
    let gold = ResultTable::new(cols.clone(), gold_rows.clone());

    let mut order: Vec<usize> = (0..width).collect();
    order.shuffle(rng);
    let mut pred_rows: Vec<Vec<Cell>> =
        gold_rows.iter().map(|r| order.iter().map(|&c| r[c].clone()).collect()).collect();
    pred_rows.shuffle(rng);
    let mut pred_cols: Vec<String> = order.iter().map(|&c| format!("p_{}", cols[c])).collect();
    for (k, &c) in order.iter().enumerate() {
        if cols[c] == "id" {
            pred_cols[k] = "id".into();
        }
    }
    match rng.gen_range(0..6) {
        0 if !pred_rows.is_empty() => {
            let r = rng.gen_range(0..pred_rows.len());
            let c = rng.gen_range(0..width);
            pred_rows[r][c] = pool.choose(rng).unwrap().clone();
        }
        1 if !pred_rows.is_empty() => {
            pred_rows.pop();
        }
        2 => {
            pred_cols.push("gene_id".into());
            for row in &mut pred_rows {
                row.push(i(rng.gen_range(0..100)));
            }
        }
        3 if !pred_rows.is_empty() => {
            let dup = pred_rows[0].clone();
            pred_rows[0] = pred_rows[pred_rows.len() - 1].clone();
            let last = pred_rows.len() - 1;
            pred_rows[last] = dup;
            pred_rows.push(pred_rows[0].clone());
            pred_rows.remove(0);
        }
        _ => {}
    }
    (ResultTable::new(pred_cols, pred_rows), gold)
}

fn metrics_oracle(check: &mut Check) {
    let start = Instant::now();
    let cases = handcrafted_cases();
    let mut tiers: BTreeMap<&str, usize> = BTreeMap::new();
    let mut exact_pairs = 0;
    for c in &cases {
        let pred_ref = match &c.pred {
            Pred::Table(t) => Ok(t),
            Pred::Error(e) => Err(e),
        };
        let got = compare_results(pred_ref, &c.gold);
        *tiers.entry(got.as_str()).or_default() += 1;
        check.expect(got == c.expected, format!("{}: got {got:?}, hand label {:?}", c.name, c.expected));
        let width = c.gold.width().max(match &c.pred {
            Pred::Table(t) => t.width(),
            Pred::Error(_) => 0,
        });
        if width <= 6 {
            let oracle = oracle_compare(&c.pred, &c.gold);
            check.expect(got == oracle, format!("{}: got {got:?}, oracle {oracle:?}", c.name));
        }
        if let (ResultComparison::ExactMatch, Pred::Table(t)) = (got, &c.pred) {
            exact_pairs += 1;
            check.expect(soft_equivalent(t, &c.gold), format!("{}: exact match without soft predicate", c.name));
        }
    }
    check.expect(cases.len() >= 30, format!("only {} handcrafted pairs", cases.len()));
    check.expect(tiers.len() == 4, format!("tiers covered: {tiers:?}"));

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let random_pairs = 400;
    for n in 0..random_pairs {
        let (pred, gold) = random_table_pair(&mut rng);
        let got = compare_results(Ok(&pred), &gold);
        let oracle = oracle_compare(&Pred::Table(pred.clone()), &gold);
        check.expect(got == oracle, format!("random pair {n}: got {got:?}, oracle {oracle:?}: {pred:?} vs {gold:?}"));
        check.expect(
            soft_equivalent(&pred, &gold) == soft_equivalent(&gold, &pred),
            format!("random pair {n}: soft predicate not symmetric"),
        );
        if got == ResultComparison::ExactMatch {
            exact_pairs += 1;
            check.expect(soft_equivalent(&pred, &gold), format!("random pair {n}: exact without soft"));
        }
    }
    let elapsed = start.elapsed();
    check.expect(elapsed < METRICS_TIME_BUDGET, format!("took {elapsed:?}"));
    check.note(format!(
        "{} handcrafted pairs, tiers {tiers:?}; {random_pairs} random pairs; {exact_pairs} exact pairs satisfy the soft predicate",
        cases.len()
    ));
}

// ---------------------------------------------------------------------------
// State machine

fn state_machine(check: &mut Check) {
    let dir = tempfile::tempdir().unwrap();
    let db = common::materialize_db(dir.path());
    let naq_item = common::naq().into_iter().next().unwrap();
    let question = Question::from(&naq_item);
    let config = PromptConfig::new(3, true, carefulsql_core::prompt::ExampleSelection::Both).unwrap();
    let eval = PipelineOptions { correction_loop: true, ui_mode: false };

    struct Scenario {
        name: &'static str,
        replies: &'static [&'static str],
        options: PipelineOptions,
        verdict: &'static str,
        calls: usize,
        reprompts: usize,
        corrections: usize,
    }
    let no_loop = PipelineOptions { correction_loop: false, ui_mode: false };
    let scenarios = [
        Scenario {
            name: "abstention",
            replies: &["unanswerable question", "SELECT 1"],
            options: eval,
            verdict: "abstained",
            calls: 1,
            reprompts: 0,
            corrections: 0,
        },
        Scenario {
            name: "re-prompt then SQL",
            replies: &["the answer is 42", "SELECT 1;"],
            options: eval,
            verdict: "executed",
            calls: 2,
            reprompts: 1,
            corrections: 0,
        },
        Scenario {
            name: "two corrections then success",
            replies: &["SELECT * FROM nope;", "SELECT * FROM nope2;", "SELECT 1"],
            options: eval,
            verdict: "executed",
            calls: 3,
            reprompts: 0,
            corrections: 2,
        },
        Scenario {
            name: "correction budget exhausted",
            replies: &[
                "SELECT * FROM nope;",
                "SELECT * FROM nope2;",
                "SELECT * FROM nope3;",
                "SELECT * FROM nope4;",
                "SELECT 1",
            ],
            options: eval,
            verdict: "db_failed",
            calls: 4,
            reprompts: 0,
            corrections: 3,
        },
        Scenario {
            name: "re-prompt plus exhausted corrections",
            replies: &[
                "no idea",
                "SELECT * FROM nope;",
                "SELECT * FROM nope2;",
                "SELECT * FROM nope3;",
                "SELECT * FROM nope4;",
                "SELECT 1",
            ],
            options: eval,
            verdict: "db_failed",
            calls: 5,
            reprompts: 1,
            corrections: 3,
        },
        Scenario {
            name: "unusable twice",
            replies: &["hmm", "still thinking", "SELECT 1"],
            options: eval,
            verdict: "unusable",
            calls: 2,
            reprompts: 1,
            corrections: 0,
        },
        Scenario {
            name: "abstention during correction",
            replies: &["SELECT * FROM nope;", "unanswerable question", "SELECT 1"],
            options: eval,
            verdict: "abstained",
            calls: 2,
            reprompts: 0,
            corrections: 1,
        },
        Scenario {
            name: "correction loop disabled",
            replies: &["SELECT * FROM nope;", "SELECT 1"],
            options: no_loop,
            verdict: "db_failed",
            calls: 1,
            reprompts: 0,
            corrections: 0,
        },
        Scenario {
            name: "ui mode abstention with explanation",
            replies: &["unanswerable question", "The schema has no column X."],
            options: PipelineOptions { correction_loop: true, ui_mode: true },
            verdict: "abstained",
            calls: 2,
            reprompts: 0,
            corrections: 0,
        },
        Scenario {
            name: "ui mode explanation unavailable",
            replies: &["unanswerable question"],
            options: PipelineOptions { correction_loop: true, ui_mode: true },
            verdict: "abstained",
            calls: 1,
            reprompts: 0,
            corrections: 0,
        },
        Scenario {
            name: "ui mode summary",
            replies: &["SELECT 1 AS n", "There is 1 match."],
            options: PipelineOptions { correction_loop: true, ui_mode: true },
            verdict: "executed",
            calls: 2,
            reprompts: 0,
            corrections: 0,
        },
    ];

    let mut lengths = std::collections::BTreeSet::new();
    for sc in &scenarios {
        let (pipeline, provider) = common::scripted_pipeline(&db, sc.replies);
        let outcome = match pipeline.answer_question(&question, &config, sc.options) {
            Ok(o) => o,
            Err(e) => {
                check.expect(false, format!("{}: run failed: {e}", sc.name));
                continue;
            }
        };
        let name = sc.name;
        check.expect(outcome.verdict.name() == sc.verdict, format!("{name}: verdict {}", outcome.verdict.name()));
        // A failed enrichment attempt reaches the provider but leaves no transcript entry.
        let failed_enrichments = outcome
            .events
            .iter()
            .filter(|e| matches!(e, carefulsql_core::pipeline::PipelineEvent::EnrichmentFailed { .. }))
            .count();
        check.expect(
            provider.calls() == sc.calls + failed_enrichments,
            format!("{name}: {} provider calls", provider.calls()),
        );
        check.expect(outcome.transcript.len() == sc.calls, format!("{name}: transcript {}", outcome.transcript.len()));
        check.expect(outcome.reprompts_used == sc.reprompts, format!("{name}: reprompts {}", outcome.reprompts_used));
        check.expect(
            outcome.corrections_used == sc.corrections,
            format!("{name}: corrections {}", outcome.corrections_used),
        );
        check.expect(
            outcome.pipeline_calls() == 1 + outcome.reprompts_used + outcome.corrections_used,
            format!("{name}: pipeline calls {} do not add up", outcome.pipeline_calls()),
        );
        check.expect(outcome.pipeline_calls() <= MAX_PIPELINE_CALLS, format!("{name}: over the call budget"));
        if !sc.options.ui_mode {
            check.expect(outcome.enrichment_calls() == 0, format!("{name}: enrichment without ui mode"));
            lengths.insert(outcome.transcript.len());
        }
        if !sc.options.correction_loop {
            check.expect(outcome.corrections_used == 0, format!("{name}: corrections with loop disabled"));
        }
        if outcome.verdict.is_abstained() {
            let executions_after_abstention = outcome
                .events
                .iter()
                .skip_while(|e| {
                    !matches!(
                        e,
                        carefulsql_core::pipeline::PipelineEvent::LlmCalled {
                            output: Some(ModelOutputClass::Abstention),
                            ..
                        }
                    )
                })
                .filter(|e| {
                    matches!(
                        e,
                        carefulsql_core::pipeline::PipelineEvent::Executed { .. }
                            | carefulsql_core::pipeline::PipelineEvent::ExecutionFailed { .. }
                    )
                })
                .count();
            check.expect(executions_after_abstention == 0, format!("{name}: executed after abstention"));
        }
        if sc.reprompts == 1 {
            let req = &outcome.transcript[1].request;
            check.expect(req.last_user_turn() == REPROMPT_MESSAGE, format!("{name}: re-prompt text differs"));
            check.expect(
                req.user_turns.len() == 2 && req.assistant_turns.first().map(String::as_str) == Some(sc.replies[0]),
                format!("{name}: re-prompt lost the conversation"),
            );
        }
        if sc.corrections > 0 {
            let first =
                outcome.transcript.iter().find(|e| e.kind == carefulsql_core::pipeline::CallKind::Correction).unwrap();
            check.expect(
                first
                    .request
                    .last_user_turn()
                    .starts_with("Please correct the SQL query based on the following error message: ")
                    && first.request.last_user_turn().contains("nope"),
                format!("{name}: correction message `{}`", first.request.last_user_turn()),
            );
        }
    }
    check.expect(lengths == (1..=5).collect(), format!("evaluation-mode transcript lengths covered: {lengths:?}"));

    // Enrichment text passthrough and degradation.
    let (pipeline, _) = common::scripted_pipeline(&db, &["unanswerable question", "The schema has no column X."]);
    let ui = PipelineOptions { correction_loop: true, ui_mode: true };
    let outcome = pipeline.answer_question(&question, &config, ui).unwrap();
    check.expect(outcome.explanation.as_deref() == Some("The schema has no column X."), "explanation passthrough");
    check.expect(outcome.transcript.iter().filter(|e| e.enrichment).count() == 1, "enrichment flagged");
    let (pipeline, _) = common::scripted_pipeline(&db, &["unanswerable question"]);
    let outcome = pipeline.answer_question(&question, &config, ui).unwrap();
    check.expect(outcome.explanation.is_none() && outcome.verdict.is_abstained(), "degraded explanation");

    // LLM failures are run-level errors, not verdicts.
    let (pipeline, _) = common::scripted_pipeline(&db, &["no idea"]);
    check.expect(pipeline.answer_question(&question, &config, eval).is_err(), "exhausted script must fail the run");

    // Random scripts never exceed the budget.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let palette = ["unanswerable question", "SELECT 1", "SELECT * FROM nope", "prose", "```sql\nSELECT 2\n```"];
    for n in 0..200 {
        let replies: Vec<&str> = (0..8).map(|_| *palette.choose(&mut rng).unwrap()).collect();
        let (pipeline, provider) = common::scripted_pipeline(&db, &replies);
        let outcome = pipeline.answer_question(&question, &config, eval).unwrap();
        check.expect(
            provider.calls() <= MAX_PIPELINE_CALLS && provider.calls() == outcome.transcript.len(),
            format!("random script {n}: {} calls", provider.calls()),
        );
        if let PipelineVerdict::Executed { .. } = outcome.verdict {
            check.expect(outcome.corrections_used <= 3, format!("random script {n}: corrections"));
        }
    }
    check.note(format!("{} scripted scenarios, transcript lengths {lengths:?}, 200 random scripts", scenarios.len()));
}

// ---------------------------------------------------------------------------
// Retriever oracle

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn retriever_oracle(check: &mut Check) {
    let hand: [(&[f64], &[f64], f64); 5] = [
        (&[1.0, 0.0], &[0.0, 1.0], 0.0),
        (&[1.0, 0.0], &[1.0, 0.0], 1.0),
        (&[1.0, 0.0], &[-2.0, 0.0], -1.0),
        (&[1.0, 1.0], &[1.0, 0.0], std::f64::consts::FRAC_1_SQRT_2),
        (&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], 0.974_631_846),
    ];
    for (a, b, want) in hand {
        let got = cosine_similarity(a, b).unwrap();
        check.expect((got - want).abs() <= COSINE_TOLERANCE, format!("cos({a:?}, {b:?}) = {got}, hand value {want}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let stores = 200;
    let mut queries = 0;
    for n in 0..stores {
        let dim = rng.gen_range(2..=16);
        let len = rng.gen_range(1..=64);
        let pool = if rng.gen_bool(0.5) { Label::Answerable } else { Label::Unanswerable };
        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(len);
        for _ in 0..len {
            if !vectors.is_empty() && rng.gen_bool(0.1) {
                // Exact duplicates exercise tie-breaking by store order.
                let dup = vectors.choose(&mut rng).unwrap().clone();
                vectors.push(dup);
                continue;
            }
            let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if v.iter().all(|x| *x == 0.0) {
                v[0] = 1.0;
            }
            vectors.push(v);
        }
        let entries: Vec<EmbeddedExample> = vectors
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let item = match pool {
                    Label::Answerable => QuestionItem::answerable(format!("q{k}"), format!("question {k}"), "SELECT 1"),
                    Label::Unanswerable => {
                        QuestionItem::unanswerable(format!("q{k}"), format!("question {k}"), NaqCategory::NonSql)
                    }
                };
                EmbeddedExample { item, vector: v.clone() }
            })
            .collect();
        let store = ExampleStore::new(pool, entries).unwrap();
        for _ in 0..3 {
            queries += 1;
            let query: Vec<f64> = if rng.gen_bool(0.3) {
                vectors.choose(&mut rng).unwrap().clone()
            } else {
                (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
            };
            if query.iter().all(|x| *x == 0.0) {
                continue;
            }
            let k = rng.gen_range(0..=len + 2);
            let exclude = rng.gen_bool(0.5).then(|| format!("q{}", rng.gen_range(0..len)));
            let got: Vec<String> =
                top_k_similar(&query, &store, k, exclude.as_deref()).unwrap().iter().map(|it| it.id.clone()).collect();

            let mut scored: Vec<(f64, usize)> = vectors
                .iter()
                .enumerate()
                .filter(|(idx, _)| exclude.as_deref() != Some(format!("q{idx}").as_str()))
                .map(|(idx, v)| (oracle_cosine(&query, v), idx))
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<(f64, String)> = scored.iter().take(k).map(|(sim, idx)| (*sim, format!("q{idx}"))).collect();

            check.expect(got.len() == want.len(), format!("store {n}: {} results, oracle {}", got.len(), want.len()));
            if let Some(ex) = &exclude {
                check.expect(!got.contains(ex), format!("store {n}: excluded id {ex} returned"));
            }
            let sim_of = |id: &str| {
                let idx: usize = id[1..].parse().unwrap();
                oracle_cosine(&query, &vectors[idx])
            };
            for (pos, (id, (want_sim, want_id))) in got.iter().zip(&want).enumerate() {
                let ok = id == want_id || (sim_of(id) - want_sim).abs() <= RANKING_TIE_TOLERANCE;
                check.expect(ok, format!("store {n} position {pos}: got {id}, oracle {want_id}"));
            }
        }
    }
    check.note(format!("{stores} random stores, {queries} queries, 5 hand cosine values"));
}

// ---------------------------------------------------------------------------
// Normalization and output classification

fn normalization(check: &mut Check) {
    check.expect(sql_exact_match("SELECT  name FROM gene;", "select name from gene"), "example 1");
    check.expect(!sql_exact_match("select name from gene", "select symbol from gene"), "example 2");
    check.expect(!sql_exact_match("select count(*) from gene", "select count( * ) from gene"), "example 3");

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let alphabet: Vec<char> = "SELECTselect from;;  \t\n(*)'x_1,ÄäΣ".chars().collect();
    for _ in 0..2000 {
        let len = rng.gen_range(0..40);
        let text: String = (0..len).map(|_| *alphabet.choose(&mut rng).unwrap()).collect();
        let once = normalize_sql(&text);
        check.expect(normalize_sql(&once) == once, format!("not idempotent on {text:?}"));
    }

    use ModelOutputClass::{Abstention, Sql, Unusable};
    let sql = |s: &str| Sql(s.to_string());
    let fixtures: Vec<(&str, ModelOutputClass)> = vec![
        ("unanswerable question", Abstention),
        ("Unanswerable Question.", Abstention),
        ("  UNANSWERABLE QUESTION  ", Abstention),
        ("[SQL]: unanswerable question", Abstention),
        ("```\nunanswerable question\n```", Abstention),
        ("```sql\nunanswerable question\n```", Abstention),
        ("I cannot answer this: unanswerable question", Abstention),
        ("SELECT * FROM disease;\n-- unanswerable question", Abstention),
        ("```sql\nSELECT 1\n```\nOtherwise this is an unanswerable question.", Abstention),
        ("SELECT name FROM disease", sql("SELECT name FROM disease")),
        ("SELECT 1;", sql("SELECT 1;")),
        ("```sql\nSELECT name FROM disease;\n```", sql("SELECT name FROM disease;")),
        ("```\nSELECT id FROM biomarker\n```", sql("SELECT id FROM biomarker")),
        ("```SQL\nselect 2\n```", sql("select 2")),
        ("Here you go:\n```sql\nSELECT 1\n```\nand also\n```sql\nSELECT 2\n```", sql("SELECT 1")),
        ("```postgresql\nSELECT a FROM t\n```", sql("SELECT a FROM t")),
        ("[SQL]: SELECT count(*) FROM disease", sql("SELECT count(*) FROM disease")),
        ("[Q]: x\n[SQL]: SELECT 1\n[SQL]: SELECT 2", sql("SELECT 2")),
        ("The query is SELECT name FROM disease; it lists names.", sql("SELECT name FROM disease;")),
        ("Answer: select * from t", sql("select * from t")),
        ("WITH up AS (SELECT * FROM t) SELECT * FROM up;", sql("WITH up AS (SELECT * FROM t) SELECT * FROM up;")),
        ("the answer is 42", Unusable("the answer is 42".into())),
        (
            "Please provide more details with respect to the gene.",
            Unusable("Please provide more details with respect to the gene.".into()),
        ),
        ("", Unusable(String::new())),
        ("```\n\n```", Unusable("```\n\n```".into())),
        ("I would select the best gene.", sql("select the best gene.")),
    ];
    for (raw, want) in &fixtures {
        let got = classify_output(raw);
        check.expect(&got == want, format!("classify({raw:?}) = {got:?}, expected {want:?}"));
    }
    check.expect(fixtures.len() >= 20, "fewer than 20 classification fixtures");
    check.note(format!("3 exact-match examples, 2000 idempotence samples, {} classification fixtures", fixtures.len()));
}

// ---------------------------------------------------------------------------
// End-to-end desk run and safety

fn desk_config(db: &Path) -> AppConfig {
    AppConfig {
        database: Some(db.display().to_string()),
        schema: Some(common::fixture("oncomx_mini.schema.json")),
        seed: Some(common::fixture("seed.json")),
        naq: Some(common::fixture("naq.json")),
        embeddings: common::fixture("embeddings.json").display().to_string(),
        llm: Some(format!("scripted:{}", common::fixture("scripted/desk_run.json").display())),
        models: vec!["scripted".into()],
        ..AppConfig::default()
    }
}

fn desk_items() -> Vec<QuestionItem> {
    let mut items = common::dev();
    items.extend(common::naq());
    items
}

/// One full `evaluate` run; returns the report and the bytes written.
fn desk_evaluation(db: &Path, out_dir: &Path) -> (EvalReport, Vec<u8>, Vec<u8>) {
    let config = desk_config(db);
    let pipeline = config.pipeline().unwrap();
    let items = desk_items();
    let cache = gold_cache_for(&pipeline, &items, Some(&out_dir.join("gold.json")), 2).unwrap();
    let regimes = parse_regimes("nar-both-5").unwrap();
    let reports = evaluate_regimes(&pipeline, &items, &cache, &regimes, true, 4).unwrap();
    let out = out_dir.join("report.json");
    write_reports(&reports, &out).unwrap();
    let json = std::fs::read(&out).unwrap();
    let csv = std::fs::read(out.with_extension("csv")).unwrap();
    (reports.into_iter().next().unwrap(), json, csv)
}

fn desk_run(check: &mut Check) {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let db = common::materialize_db(dir.path());
    let (run_a, run_b) = (dir.path().join("a"), dir.path().join("b"));
    std::fs::create_dir_all(&run_a).unwrap();
    std::fs::create_dir_all(&run_b).unwrap();
    let (report, json_a, csv_a) = desk_evaluation(&db, &run_a);
    let (_, json_b, csv_b) = desk_evaluation(&db, &run_b);

    check.expect(json_a == json_b, "JSON reports differ between runs");
    check.expect(csv_a == csv_b, "CSV reports differ between runs");
    let csv_lines = String::from_utf8(csv_a).unwrap().lines().count();
    check.expect(csv_lines == 26 + 1, format!("CSV has {csv_lines} lines"));

    // Hand-derived from the authored replies in fixtures/scripted/desk_run.json:
    // dev01/05/06 reproduce the gold query (exact), dev02/03/04 differ only by
    // names, identifier columns, column order or row order (soft), dev07 drops
    // a filter, dev08 never fixes its column name, dev09 abstains and dev10
    // never yields SQL. Every unanswerable reply is an abstention.
    let expected_tiers = [
        ("dev01", "executed", Some(ResultComparison::ExactMatch), Some(true)),
        ("dev02", "executed", Some(ResultComparison::SoftCorrect), Some(false)),
        ("dev03", "executed", Some(ResultComparison::SoftCorrect), Some(false)),
        ("dev04", "executed", Some(ResultComparison::SoftCorrect), Some(false)),
        ("dev05", "executed", Some(ResultComparison::ExactMatch), Some(true)),
        ("dev06", "executed", Some(ResultComparison::ExactMatch), Some(true)),
        ("dev07", "executed", Some(ResultComparison::Incorrect), Some(false)),
        ("dev08", "db_failed", Some(ResultComparison::DbError), Some(false)),
        ("dev09", "abstained", Some(ResultComparison::Incorrect), Some(false)),
        ("dev10", "unusable", Some(ResultComparison::Incorrect), Some(false)),
    ];
    let records: BTreeMap<&str, _> = report.per_question.iter().map(|r| (r.id.as_str(), r)).collect();
    for (id, verdict, tier, exact_sql) in expected_tiers {
        let Some(r) = records.get(id) else {
            check.expect(false, format!("{id} missing from report"));
            continue;
        };
        check.expect(r.verdict == verdict, format!("{id}: verdict {}", r.verdict));
        check.expect(r.result_comparison == tier, format!("{id}: comparison {:?}", r.result_comparison));
        check.expect(r.sql_exact_match == exact_sql, format!("{id}: sql exact match {:?}", r.sql_exact_match));
    }
    for r in report.per_question.iter().filter(|r| r.label == Label::Unanswerable) {
        check.expect(r.naq_detected == Some(true), format!("{}: not detected", r.id));
    }

    let a = &report.aggregates;
    check.expect(a.answerable_scored == 10 && a.unanswerable_scored == 16, "denominators");
    check.expect(a.naq_detection_acc == Some(1.0), format!("naq_detection_acc {:?}", a.naq_detection_acc));
    check.expect(a.naq_detection_by_category.len() == 8, "all eight categories reported");
    for (category, score) in &a.naq_detection_by_category {
        check.expect(score.total == 2 && score.acc == Some(1.0), format!("{category:?}: {score:?}"));
    }
    check.expect(a.result_acc_soft == Some(0.6), format!("result_acc_soft {:?}", a.result_acc_soft));
    check.expect(a.result_acc_exact == Some(0.3), format!("result_acc_exact {:?}", a.result_acc_exact));
    check.expect(a.sql_exact_match_acc == Some(0.3), format!("sql_exact_match_acc {:?}", a.sql_exact_match_acc));
    check.expect(
        a.db_error_rate == Some(0.125) && a.db_error_denominator == 8,
        format!("db_error_rate {:?} over {}", a.db_error_rate, a.db_error_denominator),
    );
    check.expect(
        a.false_abstention_rate_on_answerable == Some(0.1),
        format!("false abstention {:?}", a.false_abstention_rate_on_answerable),
    );
    check.expect(a.infra_failures == 0, "infra failures");
    check.expect(report.config.regime == "nar-both-5", "config echo");
    let elapsed = start.elapsed();
    check.expect(elapsed < DESK_RUN_TIME_BUDGET, format!("took {elapsed:?}"));
    check.note(format!(
        "10 AQ + 16 NAQ, soft {:?}, exact {:?}, naq {:?}, two runs byte-identical",
        a.result_acc_soft, a.result_acc_exact, a.naq_detection_acc
    ));
}

fn safety(check: &mut Check) {
    let dir = tempfile::tempdir().unwrap();
    let db = common::materialize_db(dir.path());
    let before = file_checksum(&db).unwrap();
    let out = dir.path().join("run");
    std::fs::create_dir_all(&out).unwrap();
    desk_evaluation(&db, &out);

    // A model that only proposes writes. Fenced, so each one reaches the
    // executor whole.
    let scripted_writes = [
        "```sql\nSELECT 1; DELETE FROM disease\n```",
        "```sql\nDROP TABLE biomarker\n```",
        "```sql\nUPDATE disease SET name = 'x'\n```",
        "```sql\nINSERT INTO disease VALUES (1, 'x')\n```",
    ];
    let (pipeline, provider) = common::scripted_pipeline(&db, &scripted_writes);
    let naq = common::naq();
    let outcome = pipeline
        .answer_question(&Question::from(&naq[0]), &PromptConfig::default(), PipelineOptions::default())
        .unwrap();
    check.expect(outcome.verdict.name() == "db_failed", format!("write verdict {}", outcome.verdict.name()));
    check.expect(provider.calls() == 4, "every write attempt should reach the executor");
    let direct_writes = [
        "DELETE FROM disease",
        "DROP TABLE biomarker;",
        "UPDATE disease SET name = 'x'",
        "INSERT INTO disease VALUES (1, 'x')",
        "CREATE TABLE t (x INTEGER)",
        "ATTACH DATABASE ':memory:' AS other",
        "PRAGMA user_version = 7",
    ];
    let fenced = scripted_writes.iter().map(|w| w.trim_start_matches("```sql\n").trim_end_matches("\n```"));
    for statement in direct_writes.into_iter().chain(fenced) {
        check.expect(pipeline.executor.execute_sql(statement).is_err(), format!("`{statement}` was not rejected"));
    }
    let after = file_checksum(&db).unwrap();
    check.expect(before == after, "database checksum changed");
    check.note(format!(
        "sha256 {}… unchanged after a full run and {} write attempts",
        &before[..12],
        scripted_writes.len() * 2 + direct_writes.len()
    ));
}

// ---------------------------------------------------------------------------
// Live mode

fn live_mode() -> bool {
    let vars = ["CAREFULSQL_LIVE_CONFIG", "CAREFULSQL_LIVE_DATASET", "CAREFULSQL_LIVE_NAQ"];
    let values: Vec<Option<String>> = vars.iter().map(|v| std::env::var(v).ok()).collect();
    if values.iter().any(Option::is_none) {
        println!("SKIP live-mode (optional; set {} to run against a real model and database)", vars.join(", "));
        return true;
    }
    run("live-mode", |check| {
        let config = AppConfig::load(values[0].as_ref().unwrap()).unwrap();
        let pipeline = config.pipeline().unwrap();
        let mut items = carefulsql_core::dataset::load_questions(values[1].as_ref().unwrap()).unwrap();
        items.extend(carefulsql_core::dataset::load_questions(values[2].as_ref().unwrap()).unwrap());
        let cache = gold_cache_for(&pipeline, &items, None, config.workers).unwrap();
        let regimes = parse_regimes("all").unwrap();
        let reports = evaluate_regimes(&pipeline, &items, &cache, &regimes, true, config.workers).unwrap();
        let out = std::env::temp_dir().join("carefulsql-live").join("report.json");
        write_reports(&reports, &out).unwrap();
        for report in &reports {
            let a = &report.aggregates;
            check.expect(
                a.result_acc_soft.is_some() && a.naq_detection_acc.is_some(),
                format!("{}: missing accuracies", report.config.regime),
            );
            check.expect(
                a.naq_detection_by_category.len() == 8,
                format!("{}: categories missing", report.config.regime),
            );
        }
        check.note(format!("{} regimes written to {}", reports.len(), out.display()));
    })
}
