//! Result-set comparison: exact, soft (up to row order, column names and
//! identifier columns) or incorrect.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::executor::{canonical_decimal, canonicalize_table, Cell, ExecError, ResultTable};
use crate::schema::is_identifier_column;

pub const NUMERIC_TOLERANCE: f64 = 1e-9;

/// Upper bound on complete column assignments tried per comparison.
const MAX_ASSIGNMENTS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultComparison {
    ExactMatch,
    SoftCorrect,
    Incorrect,
    DbError,
}

impl ResultComparison {
    pub fn is_exact(self) -> bool {
        self == ResultComparison::ExactMatch
    }

    pub fn is_soft_or_better(self) -> bool {
        matches!(self, ResultComparison::ExactMatch | ResultComparison::SoftCorrect)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ResultComparison::ExactMatch => "exact_match",
            ResultComparison::SoftCorrect => "soft_correct",
            ResultComparison::Incorrect => "incorrect",
            ResultComparison::DbError => "db_error",
        }
    }
}

pub fn compare_results(pred: Result<&ResultTable, &ExecError>, gold: &ResultTable) -> ResultComparison {
    let Ok(pred) = pred else {
        return ResultComparison::DbError;
    };
    if tables_exactly_equal(pred, gold) {
        ResultComparison::ExactMatch
    } else if soft_equivalent(pred, gold) {
        ResultComparison::SoftCorrect
    } else {
        ResultComparison::Incorrect
    }
}

/// Same column names in the same order and the same rows in the same order.
pub fn tables_exactly_equal(a: &ResultTable, b: &ResultTable) -> bool {
    let (a, b) = (canonicalize_table(a), canonicalize_table(b));
    a.columns == b.columns && a.rows == b.rows
}

pub fn numbers_close(a: f64, b: f64) -> bool {
    if a == b {
        return true;
    }
    if !a.is_finite() || !b.is_finite() {
        return false;
    }
    (a - b).abs() <= NUMERIC_TOLERANCE * 1f64.max(a.abs()).max(b.abs())
}

/// Cell equality used by the soft tier: numbers within tolerance, all
/// other values exactly.
pub fn cells_match(a: &Cell, b: &Cell) -> bool {
    match (numeric(a), numeric(b)) {
        (Some(x), Some(y)) => numbers_close(x, y),
        (None, None) => a == b,
        _ => false,
    }
}

fn numeric(cell: &Cell) -> Option<f64> {
    match cell {
        Cell::Int(_) | Cell::Decimal(_) => cell.as_f64(),
        _ => None,
    }
}

/// Drops identifier columns (`id`, `*_id`) from both tables independently,
/// then looks for a column bijection under which the row multisets agree.
pub fn soft_equivalent(a: &ResultTable, b: &ResultTable) -> bool {
    let a = Columns::without_identifiers(a);
    let b = Columns::without_identifiers(b);
    if a.width() != b.width() || a.rows != b.rows {
        return false;
    }
    if a.width() == 0 {
        return true;
    }
    let mut search = BijectionSearch::new(&a, &b);
    search.run()
}

/// Column-major view of a table.
struct Columns {
    cols: Vec<Vec<Cell>>,
    rows: usize,
}

impl Columns {
    fn without_identifiers(table: &ResultTable) -> Self {
        let cols = table
            .columns
            .iter()
            .enumerate()
            .filter(|(_, name)| !is_identifier_column(name))
            .map(|(i, _)| table.rows.iter().map(|row| row.get(i).cloned().unwrap_or(Cell::Null)).collect())
            .collect();
        Self { cols, rows: table.rows.len() }
    }

    fn width(&self) -> usize {
        self.cols.len()
    }

    fn row(&self, r: usize, order: &[usize]) -> Vec<&Cell> {
        order.iter().map(|&c| &self.cols[c][r]).collect()
    }
}

/// Orders cells by type, then numeric value or text. Used both to group
/// rows by exact key and to compare columns as sorted multisets.
fn cell_order(a: &Cell, b: &Cell) -> Ordering {
    fn rank(c: &Cell) -> u8 {
        match c {
            Cell::Null => 0,
            Cell::Bool(_) => 1,
            Cell::Int(_) | Cell::Decimal(_) => 2,
            Cell::Text(_) => 3,
        }
    }
    rank(a).cmp(&rank(b)).then_with(|| match (a, b) {
        (Cell::Bool(x), Cell::Bool(y)) => x.cmp(y),
        (Cell::Text(x), Cell::Text(y)) => x.cmp(y),
        _ => match (numeric(a), numeric(b)) {
            (Some(x), Some(y)) => x.total_cmp(&y),
            _ => Ordering::Equal,
        },
    })
}

fn cell_key(cell: &Cell) -> String {
    match cell {
        Cell::Null => "null".into(),
        Cell::Bool(b) => format!("b:{b}"),
        Cell::Int(_) | Cell::Decimal(_) => match cell.as_f64() {
            Some(x) => format!("n:{}", canonical_decimal(x)),
            None => format!("d:{cell}"),
        },
        Cell::Text(t) => format!("t:{t}"),
    }
}

fn sorted_column(col: &[Cell]) -> Vec<&Cell> {
    let mut sorted: Vec<&Cell> = col.iter().collect();
    sorted.sort_by(|x, y| cell_order(x, y));
    sorted
}

/// Row multiset equality under tolerant cell matching: rows with identical
/// exact keys cancel out, the remainder is settled by bipartite matching.
fn rows_match_as_multisets(a: &Columns, a_order: &[usize], b: &Columns, b_order: &[usize]) -> bool {
    let mut counts: HashMap<Vec<String>, isize> = HashMap::new();
    let key = |cols: &Columns, order: &[usize], r: usize| -> Vec<String> {
        order.iter().map(|&c| cell_key(&cols.cols[c][r])).collect()
    };
    for r in 0..a.rows {
        *counts.entry(key(a, a_order, r)).or_default() += 1;
    }
    let mut right_left = Vec::new();
    for r in 0..b.rows {
        let k = key(b, b_order, r);
        match counts.get_mut(&k) {
            Some(n) if *n > 0 => *n -= 1,
            _ => right_left.push(r),
        }
    }
    if right_left.is_empty() {
        return true;
    }
    // Rows of `a` whose keys were not fully consumed.
    let mut left_left = Vec::new();
    for r in 0..a.rows {
        let k = key(a, a_order, r);
        if let Some(n) = counts.get_mut(&k) {
            if *n > 0 {
                *n -= 1;
                left_left.push(r);
            }
        }
    }
    if left_left.len() != right_left.len() {
        return false;
    }
    let left_rows: Vec<Vec<&Cell>> = left_left.iter().map(|&r| a.row(r, a_order)).collect();
    let right_rows: Vec<Vec<&Cell>> = right_left.iter().map(|&r| b.row(r, b_order)).collect();
    let adjacency: Vec<Vec<usize>> = left_rows
        .iter()
        .map(|l| {
            (0..right_rows.len()).filter(|&j| l.iter().zip(&right_rows[j]).all(|(x, y)| cells_match(x, y))).collect()
        })
        .collect();
    perfect_matching(&adjacency, right_rows.len())
}

/// Kuhn's augmenting-path algorithm; true when every left vertex is matched.
fn perfect_matching(adjacency: &[Vec<usize>], right: usize) -> bool {
    fn augment(u: usize, adjacency: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &v in &adjacency[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            if owner[v].is_none_or(|w| augment(w, adjacency, seen, owner)) {
                owner[v] = Some(u);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; right];
    for u in 0..adjacency.len() {
        let mut seen = vec![false; right];
        if !augment(u, adjacency, &mut seen, &mut owner) {
            return false;
        }
    }
    true
}

/// Backtracking over column assignments `a[i] -> b[j]`.
///
/// Candidates for each column of `a` are the columns of `b` holding the same
/// value multiset. Columns of `b` with identical contents are interchangeable,
/// so only the first unused one of each group is tried at every level.
struct BijectionSearch<'t> {
    a: &'t Columns,
    b: &'t Columns,
    order: Vec<usize>,
    candidates: Vec<Vec<usize>>,
    twin_group: Vec<usize>,
    assignment: Vec<usize>,
    used: Vec<bool>,
    leaves: usize,
}

impl<'t> BijectionSearch<'t> {
    fn new(a: &'t Columns, b: &'t Columns) -> Self {
        let a_sorted: Vec<Vec<&Cell>> = a.cols.iter().map(|c| sorted_column(c)).collect();
        let b_sorted: Vec<Vec<&Cell>> = b.cols.iter().map(|c| sorted_column(c)).collect();
        let candidates: Vec<Vec<usize>> = a_sorted
            .iter()
            .map(|ac| (0..b.width()).filter(|&j| ac.iter().zip(&b_sorted[j]).all(|(x, y)| cells_match(x, y))).collect())
            .collect();
        let mut twin_group = Vec::with_capacity(b.width());
        for j in 0..b.width() {
            let group = (0..j).find(|&k| b.cols[k] == b.cols[j]).map_or(j, |k| twin_group[k]);
            twin_group.push(group);
        }
        let mut order: Vec<usize> = (0..a.width()).collect();
        order.sort_by_key(|&i| candidates[i].len());
        Self {
            a,
            b,
            order,
            candidates,
            twin_group,
            assignment: vec![usize::MAX; a.width()],
            used: vec![false; b.width()],
            leaves: 0,
        }
    }

    fn run(&mut self) -> bool {
        if self.candidates.iter().any(Vec::is_empty) {
            return false;
        }
        let found = self.descend(0);
        if !found && self.leaves >= MAX_ASSIGNMENTS {
            log::warn!("column bijection search stopped after {MAX_ASSIGNMENTS} assignments");
        }
        found
    }

    fn descend(&mut self, depth: usize) -> bool {
        if depth == self.order.len() {
            self.leaves += 1;
            let a_order: Vec<usize> = (0..self.a.width()).collect();
            return rows_match_as_multisets(self.a, &a_order, self.b, &self.assignment);
        }
        let col = self.order[depth];
        let mut tried_groups = Vec::new();
        for idx in 0..self.candidates[col].len() {
            if self.leaves >= MAX_ASSIGNMENTS {
                return false;
            }
            let j = self.candidates[col][idx];
            if self.used[j] || tried_groups.contains(&self.twin_group[j]) {
                continue;
            }
            tried_groups.push(self.twin_group[j]);
            self.used[j] = true;
            self.assignment[col] = j;
            if self.descend(depth + 1) {
                return true;
            }
            self.used[j] = false;
        }
        false
    }
}
