//! Cluster selection: the miss/overlap loss and its solvers.
//!
//! For a selection vector `s` the inclusion counts are `m = A sᵀ` and the loss
//! is `Σ_x f_λ(m_x)` where
//!
//! ```text
//! f_λ(m) = 1 - m        if m < 1   (miss)
//!          0            if m = 1
//!          λ (m - 1)    if m > 1   (overlap)
//! ```
//!
//! Minimizing it under `Σ s = K` is an integer program once an auxiliary
//! vector `a ⪰ 1 - m`, `a ⪰ λ(m - 1)` replaces `f_λ(m)` and the objective
//! becomes `a · 1`. Every constraint is then linear in `(s, a)`, and for a
//! fixed `s` the minimizing `a` is the pointwise maximum of the two bounds.
//!
//! The exact solver branches on `s` (include before exclude, ascending
//! column index) and prunes with an additive relaxation: each undecided
//! column is credited with the misses it could remove and charged for the
//! overlaps it must create, independently of the other columns. Ties between
//! optimal index sets are broken towards fewer columns, then towards the
//! lexicographically smallest set, in every solver.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::assign::SparseMatrix;
use crate::error::{Result, SolverError};
use crate::exec::Execution;
use crate::types::{AssignmentMatrix, SelectionMode, SelectionSolution, SolverKind};

/// Per-sample loss `f_λ(m)`.
pub fn piecewise_loss(m: u32, lambda: f64) -> f64 {
    match m {
        0 => 1.0,
        1 => 0.0,
        _ => lambda * f64::from(m - 1),
    }
}

/// Direct evaluation of `Σ_x f_λ(m_x)` for selection vector `s`.
pub fn selection_loss(
    matrix: &AssignmentMatrix,
    s: &[bool],
    lambda: f64,
) -> Result<f64, SolverError> {
    check_len(matrix, s)?;
    Ok(matrix
        .inclusion_counts(s)
        .into_iter()
        .map(|m| piecewise_loss(m, lambda))
        .sum())
}

/// The minimizing auxiliary vector for fixed inclusion counts: the smallest
/// `a` with `a ⪰ 1 - m` and `a ⪰ λ(m - 1)`.
pub fn auxiliary_vector(counts: &[u32], lambda: f64) -> Vec<f64> {
    counts
        .iter()
        .map(|&m| {
            let m = f64::from(m);
            (1.0 - m).max(lambda * (m - 1.0))
        })
        .collect()
}

/// `min a · 1` over the linear constraints, for a fixed `s`.
pub fn linearized_objective(
    matrix: &AssignmentMatrix,
    s: &[bool],
    lambda: f64,
) -> Result<f64, SolverError> {
    check_len(matrix, s)?;
    Ok(auxiliary_vector(&matrix.inclusion_counts(s), lambda)
        .into_iter()
        .sum())
}

fn check_len(matrix: &AssignmentMatrix, s: &[bool]) -> Result<(), SolverError> {
    if s.len() != matrix.n_cols() {
        return Err(SolverError::DimensionMismatch {
            got: s.len(),
            expected: matrix.n_cols(),
        });
    }
    Ok(())
}

/// A standalone selection problem.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionInstance {
    pub matrix: AssignmentMatrix,
    pub mode: SelectionMode,
    pub lambda: f64,
}

#[derive(Serialize, Deserialize)]
struct InstanceFile {
    #[serde(flatten)]
    matrix: SparseMatrix,
    #[serde(flatten)]
    mode: SelectionMode,
    lambda: f64,
}

impl SelectionInstance {
    pub fn constrained(matrix: AssignmentMatrix, k: usize, lambda: f64) -> Self {
        Self {
            matrix,
            mode: SelectionMode::ConstrainedK { k },
            lambda,
        }
    }

    pub fn penalized(matrix: AssignmentMatrix, cost: f64, lambda: f64) -> Self {
        Self {
            matrix,
            mode: SelectionMode::Penalized { cost },
            lambda,
        }
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(&InstanceFile {
            matrix: SparseMatrix::from(&self.matrix),
            mode: self.mode,
            lambda: self.lambda,
        })
    }

    pub fn from_json(s: &str) -> crate::error::Result<Self> {
        let file: InstanceFile = serde_json::from_str(s)?;
        Ok(Self {
            matrix: AssignmentMatrix::try_from(file.matrix)?,
            mode: file.mode,
            lambda: file.lambda,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    /// Largest number of subsets the exhaustive solver will enumerate.
    pub exhaustive_cap: u128,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            exhaustive_cap: 10_000_000,
        }
    }
}

/// Solves a selection instance with the default configuration.
pub fn solve_selection(
    instance: &SelectionInstance,
    solver: SolverKind,
) -> Result<SelectionSolution, SolverError> {
    solve_selection_with(instance, solver, &SolverConfig::default())
}

pub fn solve_selection_with(
    instance: &SelectionInstance,
    solver: SolverKind,
    config: &SolverConfig,
) -> Result<SelectionSolution, SolverError> {
    let cols = Columns::new(&instance.matrix);
    let lambda = instance.lambda;
    let chosen = match (instance.mode, solver) {
        (SelectionMode::ConstrainedK { k }, _) if k > cols.n_cols() => {
            return Err(SolverError::Infeasible {
                k,
                n_cols: cols.n_cols(),
            })
        }
        (SelectionMode::ConstrainedK { k }, SolverKind::Greedy) => greedy_indices(&cols, k),
        (SelectionMode::Penalized { .. }, SolverKind::Greedy) => {
            return Err(SolverError::GreedyPenalized)
        }
        (mode, SolverKind::Exhaustive) => {
            let count = match mode {
                SelectionMode::ConstrainedK { k } => binomial(cols.n_cols(), k),
                SelectionMode::Penalized { .. } => {
                    1u128.checked_shl(cols.n_cols() as u32).unwrap_or(u128::MAX)
                }
            };
            if count > config.exhaustive_cap {
                return Err(SolverError::CapExceeded {
                    count,
                    cap: config.exhaustive_cap,
                });
            }
            Search::new(&cols, mode, lambda, false).run()
        }
        (mode, SolverKind::ExactIlp) => Search::new(&cols, mode, lambda, true).run(),
    };
    Ok(solution(
        &instance.matrix,
        &chosen,
        instance.mode,
        lambda,
        solver,
    ))
}

/// Penalized-cardinality variant: minimizes `Σ f_λ(m_x) + cost · Σ s_j` with
/// no constraint on the number of selected columns.
pub fn solve_penalized(matrix: &AssignmentMatrix, cost: f64, lambda: f64) -> SelectionSolution {
    let instance = SelectionInstance::penalized(matrix.clone(), cost, lambda);
    solve_selection(&instance, SolverKind::ExactIlp)
        .expect("penalized problems are always feasible")
}

/// Coverage-maximizing greedy baseline: K rounds, each taking the column that
/// covers the most still-uncovered samples (lowest index on ties).
pub fn greedy_select(
    matrix: &AssignmentMatrix,
    k: usize,
    lambda: f64,
) -> Result<SelectionSolution, SolverError> {
    solve_selection(
        &SelectionInstance::constrained(matrix.clone(), k, lambda),
        SolverKind::Greedy,
    )
}

/// Solves many independent instances, concurrently when `exec` allows.
pub fn solve_batch(
    instances: &[SelectionInstance],
    solver: SolverKind,
    exec: Execution,
) -> Vec<Result<SelectionSolution, SolverError>> {
    exec.map(instances, |inst| solve_selection(inst, solver))
}

fn solution(
    matrix: &AssignmentMatrix,
    chosen: &[usize],
    mode: SelectionMode,
    lambda: f64,
    solver: SolverKind,
) -> SelectionSolution {
    let mut selected = vec![false; matrix.n_cols()];
    for &j in chosen {
        selected[j] = true;
    }
    let inclusion_counts = matrix.inclusion_counts(&selected);
    let mut objective: f64 = inclusion_counts
        .iter()
        .map(|&m| piecewise_loss(m, lambda))
        .sum();
    if let SelectionMode::Penalized { cost } = mode {
        objective += cost * chosen.len() as f64;
    }
    SelectionSolution {
        selected,
        inclusion_counts,
        objective,
        mode,
        lambda,
        solver,
    }
}

pub(crate) fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

/// Sparse column view: supported row indices per column.
struct Columns {
    n_samples: usize,
    rows: Vec<Vec<u32>>,
}

impl Columns {
    fn new(matrix: &AssignmentMatrix) -> Self {
        Self {
            n_samples: matrix.n_samples(),
            rows: (0..matrix.n_cols())
                .map(|j| {
                    matrix
                        .column_rows(j)
                        .into_iter()
                        .map(|r| r as u32)
                        .collect()
                })
                .collect(),
        }
    }

    fn n_cols(&self) -> usize {
        self.rows.len()
    }
}

fn greedy_indices(cols: &Columns, k: usize) -> Vec<usize> {
    let mut covered = vec![false; cols.n_samples];
    let mut taken = vec![false; cols.n_cols()];
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<(usize, usize)> = None;
        for (j, rows) in cols.rows.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let gain = rows.iter().filter(|&&r| !covered[r as usize]).count();
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((j, gain));
            }
        }
        let Some((j, _)) = best else { break };
        taken[j] = true;
        for &r in &cols.rows[j] {
            covered[r as usize] = true;
        }
        chosen.push(j);
    }
    chosen.sort_unstable();
    chosen
}

/// Loss split into integer parts so that every solver scores a given index
/// set identically.
#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    misses: u64,
    excess: u64,
    count: u64,
}

impl Tally {
    fn value(&self, lambda: f64, cost: f64) -> f64 {
        self.misses as f64 + lambda * self.excess as f64 + cost * self.count as f64
    }
}

/// Objectives closer than this are ties; `λ` and the cost are arbitrary reals,
/// so mathematically equal objectives can differ in the last bits.
fn tie_tolerance(value: f64) -> f64 {
    1e-9 * (1.0 + value.abs())
}

/// Depth-first search over selection vectors, with or without bounding.
struct Search<'a> {
    cols: &'a Columns,
    lambda: f64,
    cost: f64,
    /// `Some(k)` for the cardinality-constrained mode.
    k: Option<usize>,
    bound: bool,
    counts: Vec<u32>,
    tally: Tally,
    stack: Vec<usize>,
    best: Option<(f64, Vec<usize>)>,
    scratch: Vec<f64>,
}

impl<'a> Search<'a> {
    fn new(cols: &'a Columns, mode: SelectionMode, lambda: f64, bound: bool) -> Self {
        let (k, cost) = match mode {
            SelectionMode::ConstrainedK { k } => (Some(k), 0.0),
            SelectionMode::Penalized { cost } => (None, cost),
        };
        Self {
            cols,
            lambda,
            cost,
            k,
            bound,
            counts: vec![0; cols.n_samples],
            tally: Tally {
                misses: cols.n_samples as u64,
                ..Tally::default()
            },
            stack: Vec::new(),
            best: None,
            scratch: Vec::new(),
        }
    }

    fn run(mut self) -> Vec<usize> {
        self.visit(0);
        self.best.map(|(_, set)| set).unwrap_or_default()
    }

    fn include(&mut self, j: usize) {
        for &r in &self.cols.rows[j] {
            let m = &mut self.counts[r as usize];
            if *m == 0 {
                self.tally.misses -= 1;
            } else {
                self.tally.excess += 1;
            }
            *m += 1;
        }
        self.tally.count += 1;
        self.stack.push(j);
    }

    fn exclude_last(&mut self) {
        let j = self.stack.pop().expect("non-empty stack");
        for &r in &self.cols.rows[j] {
            let m = &mut self.counts[r as usize];
            *m -= 1;
            if *m == 0 {
                self.tally.misses += 1;
            } else {
                self.tally.excess -= 1;
            }
        }
        self.tally.count -= 1;
    }

    fn offer(&mut self) {
        let value = self.tally.value(self.lambda, self.cost);
        let better = match &self.best {
            None => true,
            Some((bv, bset)) => {
                let eps = tie_tolerance(*bv);
                let key = (self.stack.len(), &self.stack);
                value < bv - eps || ((value - bv).abs() <= eps && key < (bset.len(), bset))
            }
        };
        if better {
            self.best = Some((value, self.stack.clone()));
        }
    }

    fn pruned(&self, lower: f64) -> bool {
        match &self.best {
            Some((bv, _)) => lower > bv + tie_tolerance(*bv),
            None => false,
        }
    }

    fn visit(&mut self, next: usize) {
        let n_cols = self.cols.n_cols();
        match self.k {
            Some(k) => {
                let remaining = k - self.stack.len();
                if remaining == 0 {
                    self.offer();
                    return;
                }
                if n_cols - next < remaining {
                    return;
                }
                if self.bound {
                    let lower = self.constrained_bound(next, remaining);
                    if self.pruned(lower) {
                        return;
                    }
                }
            }
            None => {
                if next == n_cols {
                    self.offer();
                    return;
                }
                if self.bound {
                    let (lower, improvable) = self.penalized_bound(next);
                    if !improvable {
                        // No undecided column can lower the objective, and any
                        // superset of the current set sorts after it.
                        self.offer();
                        return;
                    }
                    if self.pruned(lower) {
                        return;
                    }
                }
            }
        }
        self.include(next);
        self.visit(next + 1);
        self.exclude_last();
        self.visit(next + 1);
    }

    /// For undecided column `j`: (newly covered samples, samples it would overlap).
    fn gains(&self, j: usize) -> (f64, f64) {
        let mut fresh = 0u32;
        let mut overlap = 0u32;
        for &r in &self.cols.rows[j] {
            if self.counts[r as usize] == 0 {
                fresh += 1;
            } else {
                overlap += 1;
            }
        }
        (f64::from(fresh), f64::from(overlap))
    }

    fn constrained_bound(&mut self, next: usize, remaining: usize) -> f64 {
        let lambda = self.lambda;
        let current = self.tally.value(lambda, 0.0);
        let n_cols = self.cols.n_cols();
        let mut net = std::mem::take(&mut self.scratch);
        net.clear();
        let mut fresh = Vec::with_capacity(n_cols - next);
        let mut overlap = Vec::with_capacity(n_cols - next);
        for j in next..n_cols {
            let (u, c) = self.gains(j);
            net.push(u - lambda * c);
            fresh.push(u);
            overlap.push(c);
        }
        let top = |v: &mut Vec<f64>| -> f64 {
            v.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
            v.iter().take(remaining).sum()
        };
        // Joint bound: every chosen column removes at most its fresh samples
        // from the misses and adds at least its overlaps to the excess.
        let joint = current - top(&mut net);
        // Split bound on the two loss terms.
        overlap.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
        let min_overlap: f64 = overlap.iter().take(remaining).sum();
        let misses = (self.tally.misses as f64 - top(&mut fresh)).max(0.0);
        let split = misses + lambda * (self.tally.excess as f64 + min_overlap);
        self.scratch = net;
        joint.max(split)
    }

    fn penalized_bound(&self, next: usize) -> (f64, bool) {
        let current = self.tally.value(self.lambda, self.cost);
        let mut credit = 0.0;
        for j in next..self.cols.n_cols() {
            let (u, c) = self.gains(j);
            let net = u - self.lambda * c - self.cost;
            if net > 0.0 {
                credit += net;
            }
        }
        let floor = self.lambda * self.tally.excess as f64 + self.cost * self.tally.count as f64;
        ((current - credit).max(floor), credit > 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use itertools::Itertools;

    /// Columns e1={x1,x2}, e2={x3,x4}, e3={x1..x4}, e4={x1} (zero-based here).
    fn four_col() -> AssignmentMatrix {
        AssignmentMatrix::from_supports(4, &[vec![0, 1], vec![2, 3], vec![0, 1, 2, 3], vec![0]])
    }

    fn sel(n: usize, idx: &[usize]) -> Vec<bool> {
        (0..n).map(|j| idx.contains(&j)).collect()
    }

    /// Independent brute force: all subsets, direct per-sample evaluation.
    fn brute(m: &AssignmentMatrix, mode: SelectionMode, lambda: f64) -> (f64, Vec<usize>) {
        let n = m.n_cols();
        let mut best: Option<(f64, Vec<usize>)> = None;
        for size in 0..=n {
            if let SelectionMode::ConstrainedK { k } = mode {
                if size != k {
                    continue;
                }
            }
            for combo in (0..n).combinations(size) {
                let mut v = selection_loss(m, &sel(n, &combo), lambda).unwrap();
                if let SelectionMode::Penalized { cost } = mode {
                    v += cost * size as f64;
                }
                let replace = match &best {
                    None => true,
                    Some((bv, bs)) => {
                        v < bv - 1e-9
                            || ((v - bv).abs() <= 1e-9 && (combo.len(), &combo) < (bs.len(), bs))
                    }
                };
                if replace {
                    best = Some((v, combo));
                }
            }
        }
        best.unwrap()
    }

    #[test]
    fn piecewise_branches() {
        assert_eq!(piecewise_loss(0, 0.5), 1.0);
        assert_eq!(piecewise_loss(1, 0.5), 0.0);
        assert_eq!(piecewise_loss(3, 0.5), 1.0);
        assert_eq!(piecewise_loss(5, 0.0), 0.0);
    }

    #[test]
    fn loss_on_fixture() {
        let m = four_col();
        assert_eq!(selection_loss(&m, &sel(4, &[0, 1]), 0.5).unwrap(), 0.0);
        assert_eq!(selection_loss(&m, &sel(4, &[2, 3]), 0.5).unwrap(), 0.5);
        assert_eq!(selection_loss(&m, &sel(4, &[]), 0.5).unwrap(), 4.0);
        assert_eq!(
            selection_loss(&m, &[true], 0.5),
            Err(SolverError::DimensionMismatch {
                got: 1,
                expected: 4
            })
        );
    }

    #[test]
    fn exact_and_exhaustive_on_fixture() {
        let inst = SelectionInstance::constrained(four_col(), 2, 0.5);
        for solver in [SolverKind::ExactIlp, SolverKind::Exhaustive] {
            let s = solve_selection(&inst, solver).unwrap();
            assert_eq!(s.selected_indices(), vec![0, 1]);
            assert_eq!(s.objective, 0.0);
        }
        assert_eq!(brute(&four_col(), inst.mode, 0.5), (0.0, vec![0, 1]));
    }

    #[test]
    fn greedy_on_fixture() {
        let s = greedy_select(&four_col(), 2, 0.5).unwrap();
        // e3 first (covers all four), then the lowest-index zero-gain column e1.
        assert_eq!(s.selected_indices(), vec![0, 2]);
        assert_eq!(s.objective, 1.0);
        assert_eq!(
            greedy_select(&four_col(), 1, 0.5)
                .unwrap()
                .selected_indices(),
            vec![2]
        );
    }

    #[test]
    fn greedy_disjoint_columns_cover_everything() {
        let m = AssignmentMatrix::from_supports(6, &[vec![0, 1], vec![2, 3], vec![4, 5]]);
        let s = greedy_select(&m, 3, 0.5).unwrap();
        assert!(s.inclusion_counts.iter().all(|&c| c == 1));
    }

    #[test]
    fn k_equal_to_columns_selects_all() {
        let m = four_col();
        let s = solve_selection(
            &SelectionInstance::constrained(m.clone(), 4, 0.5),
            SolverKind::ExactIlp,
        )
        .unwrap();
        assert_eq!(s.selected, vec![true; 4]);
        assert_eq!(s.objective, selection_loss(&m, &[true; 4], 0.5).unwrap());
    }

    #[test]
    fn infeasible_k() {
        let inst = SelectionInstance::constrained(four_col(), 5, 0.5);
        for solver in [
            SolverKind::ExactIlp,
            SolverKind::Exhaustive,
            SolverKind::Greedy,
        ] {
            assert_eq!(
                solve_selection(&inst, solver),
                Err(SolverError::Infeasible { k: 5, n_cols: 4 })
            );
        }
    }

    #[test]
    fn exhaustive_cap() {
        let inst = SelectionInstance::constrained(four_col(), 2, 0.5);
        let cfg = SolverConfig { exhaustive_cap: 5 };
        assert_eq!(
            solve_selection_with(&inst, SolverKind::Exhaustive, &cfg),
            Err(SolverError::CapExceeded { count: 6, cap: 5 })
        );
        // The exact solver ignores the cap.
        assert!(solve_selection_with(&inst, SolverKind::ExactIlp, &cfg).is_ok());
    }

    #[test]
    fn penalized_fixture() {
        // With cost 10 on a 4-sample corpus nothing repays its cost: the empty
        // selection (objective 4) beats {e3} (10) and {e1,e2} (20).
        let s = solve_penalized(&four_col(), 10.0, 0.5);
        assert_eq!(s.selected_indices(), Vec::<usize>::new());
        assert_eq!(s.objective, 4.0);
        assert_eq!(brute(&four_col(), s.mode, 0.5), (4.0, vec![]));
        // With cost 1, {e3} (1) beats {e1,e2} (2) and the empty set (4).
        let s = solve_penalized(&four_col(), 1.0, 0.5);
        assert_eq!(s.selected_indices(), vec![2]);
        assert_eq!(s.objective, 1.0);
    }

    #[test]
    fn penalized_sparse_columns_select_nothing() {
        let m = AssignmentMatrix::from_supports(3, &[vec![0], vec![1], vec![]]);
        let s = solve_penalized(&m, 5.0, 0.5);
        assert!(s.selected_indices().is_empty());
        assert_eq!(s.objective, 3.0);
    }

    #[test]
    fn greedy_rejects_penalized() {
        let inst = SelectionInstance::penalized(four_col(), 1.0, 0.5);
        assert_eq!(
            solve_selection(&inst, SolverKind::Greedy),
            Err(SolverError::GreedyPenalized)
        );
    }

    #[test]
    fn lexicographic_tie_break() {
        // Three identical columns: every pair ties, {0,1} must win.
        let m = AssignmentMatrix::from_supports(2, &[vec![0], vec![0], vec![0], vec![1]]);
        let inst = SelectionInstance::constrained(m, 2, 0.5);
        for solver in [SolverKind::ExactIlp, SolverKind::Exhaustive] {
            assert_eq!(
                solve_selection(&inst, solver).unwrap().selected_indices(),
                vec![0, 3]
            );
        }
    }

    #[test]
    fn instance_json_round_trip() {
        let inst = SelectionInstance::constrained(four_col(), 2, 0.5);
        let back = SelectionInstance::from_json(&inst.to_json().unwrap()).unwrap();
        assert_eq!(back, inst);
        let raw = r#"{"n":2,"m":1,"ones":[[1,0]],"columns":["only"],"mode":"penalized","cost":0.5,"lambda":0.3}"#;
        let inst = SelectionInstance::from_json(raw).unwrap();
        assert_eq!(inst.mode, SelectionMode::Penalized { cost: 0.5 });
        assert!(inst.matrix.get(1, 0));
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(4, 2), 6);
        assert_eq!(binomial(16, 5), 4368);
        assert_eq!(binomial(3, 4), 0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix() -> impl Strategy<Value = AssignmentMatrix> {
            (1usize..12, 1usize..8).prop_flat_map(|(n, j)| {
                proptest::collection::vec(proptest::collection::vec(any::<bool>(), n), j).prop_map(
                    move |cols| {
                        let supports: Vec<Vec<usize>> = cols
                            .iter()
                            .map(|c| {
                                c.iter()
                                    .enumerate()
                                    .filter_map(|(i, &b)| b.then_some(i))
                                    .collect()
                            })
                            .collect();
                        AssignmentMatrix::from_supports(n, &supports)
                    },
                )
            })
        }

        proptest! {
            #[test]
            fn exact_matches_brute_force(m in matrix(), k in 0usize..8, lambda in prop::sample::select(vec![0.0, 0.3, 0.5, 1.0, 2.0])) {
                let k = k.min(m.n_cols());
                let inst = SelectionInstance::constrained(m.clone(), k, lambda);
                let s = solve_selection(&inst, SolverKind::ExactIlp).unwrap();
                let (bv, bset) = brute(&m, inst.mode, lambda);
                prop_assert!((s.objective - bv).abs() < 1e-9);
                prop_assert_eq!(s.selected_indices(), bset);
                let g = solve_selection(&inst, SolverKind::Greedy).unwrap();
                prop_assert!(g.objective >= s.objective - 1e-9);
            }

            #[test]
            fn penalized_matches_brute_force(m in matrix(), cost in prop::sample::select(vec![0.0, 0.5, 1.0, 3.0]), lambda in prop::sample::select(vec![0.0, 0.5, 1.0])) {
                let s = solve_penalized(&m, cost, lambda);
                let (bv, bset) = brute(&m, s.mode, lambda);
                prop_assert!((s.objective - bv).abs() < 1e-9);
                prop_assert_eq!(s.selected_indices(), bset);
            }

            #[test]
            fn counts_recompute(m in matrix(), bits in proptest::collection::vec(any::<bool>(), 8)) {
                let s: Vec<bool> = bits.into_iter().take(m.n_cols()).chain(std::iter::repeat(false)).take(m.n_cols()).collect();
                let direct = selection_loss(&m, &s, 0.5).unwrap();
                let linear = linearized_objective(&m, &s, 0.5).unwrap();
                prop_assert_eq!(direct, linear);
            }

            #[test]
            fn loss_monotone_in_lambda(m in matrix(), l1 in 0.0f64..2.0, dl in 0.0f64..2.0) {
                let s = vec![true; m.n_cols()];
                prop_assert!(selection_loss(&m, &s, l1).unwrap() <= selection_loss(&m, &s, l1 + dl).unwrap() + 1e-12);
            }

            #[test]
            fn zero_lambda_is_max_coverage(m in matrix(), k in 1usize..8) {
                let k = k.min(m.n_cols());
                let s = solve_selection(&SelectionInstance::constrained(m.clone(), k, 0.0), SolverKind::ExactIlp).unwrap();
                let best_cover = (0..m.n_cols()).combinations(k).map(|c| {
                    m.inclusion_counts(&sel(m.n_cols(), &c)).iter().filter(|&&x| x > 0).count()
                }).max().unwrap();
                prop_assert_eq!(s.objective, (m.n_samples() - best_cover) as f64);
            }
        }
    }
}
