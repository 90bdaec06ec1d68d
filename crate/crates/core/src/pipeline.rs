//! The iterative propose/assign/select loop, the optional commitment step and
//! recursive taxonomy construction.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::assign::{extend_matrix, AssignStats, JudgmentCache};
use crate::backend::{BackendHandle, CompletionRequest, Distractors, OracleBackend};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::propose::{augment_goal, propose_candidates};
use crate::select::{solve_selection, SelectionInstance};
use crate::types::{
    AssignmentMatrix, ClusterSet, ClusteringTask, Explanation, Sample, SelectionSolution,
    SolverKind, TaxonomyNode,
};

const COMMIT_MAX_TOKENS: u32 = 16;

/// Backends for the three roles. Without a committer, commitment uses the
/// deterministic fallback rule only.
#[derive(Debug, Clone)]
pub struct Backends {
    pub proposer: BackendHandle,
    pub assigner: BackendHandle,
    pub committer: Option<BackendHandle>,
}

impl Backends {
    /// Keyword oracle in every role.
    pub fn oracle() -> Self {
        Self::oracle_with(Distractors::default())
    }

    /// Oracle backends; `distractors` only affect the proposer.
    pub fn oracle_with(distractors: Distractors) -> Self {
        let oracle = BackendHandle::new(OracleBackend::default());
        Self {
            proposer: BackendHandle::new(OracleBackend::new(distractors)),
            assigner: oracle.clone(),
            committer: Some(oracle),
        }
    }

    pub fn handles(&self) -> Vec<&BackendHandle> {
        let mut v = vec![&self.proposer, &self.assigner];
        v.extend(self.committer.as_ref());
        v
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub solver: SolverKind,
    pub exec: Execution,
    /// Give every sample exactly one cluster after selection.
    pub commit: bool,
    /// Select fewer than K clusters when the pool ends up smaller than K,
    /// instead of failing.
    pub allow_fewer: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            solver: SolverKind::ExactIlp,
            exec: Execution::default(),
            commit: false,
            allow_fewer: false,
        }
    }
}

/// What happened in one iteration of the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Samples shown to the proposer.
    pub focus: usize,
    pub prompts: usize,
    pub new_candidates: usize,
    pub pool_size: usize,
    /// Uncovered samples after this iteration's selection, if one was made.
    pub uncovered: Option<usize>,
    pub objective: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    pub assign_calls: usize,
    pub assign_cache_hits: usize,
    pub unparsed_assignments: usize,
    pub commit_calls: usize,
    pub commit_fallbacks: usize,
}

#[derive(Debug, Clone)]
pub struct PasRun {
    pub matrix: AssignmentMatrix,
    pub selection: SelectionSolution,
    pub clusters: ClusterSet,
    pub iterations: Vec<IterationRecord>,
    pub diagnostics: RunDiagnostics,
}

fn rows_to_samples(corpus: &[Sample], rows: impl IntoIterator<Item = usize>) -> Vec<&Sample> {
    rows.into_iter().map(|x| &corpus[x]).collect()
}

fn unsupported_rows(matrix: &AssignmentMatrix) -> Vec<usize> {
    (0..matrix.n_samples())
        .filter(|&x| (0..matrix.n_cols()).all(|j| !matrix.get(x, j)))
        .collect()
}

fn select(
    matrix: &AssignmentMatrix,
    k: usize,
    lambda: f64,
    solver: SolverKind,
) -> Result<SelectionSolution> {
    let instance = SelectionInstance::constrained(matrix.clone(), k, lambda);
    Ok(solve_selection(&instance, solver)?)
}

/// Runs the full loop: propose from the focus set, assign the new candidates
/// over the whole corpus, re-select K clusters, and narrow the focus to the
/// samples the selection leaves uncovered. Stops after `task.iterations`
/// rounds, when nothing is uncovered, or when the pool stops growing.
pub fn run_pas(
    task: &ClusteringTask,
    backends: &Backends,
    cache: &JudgmentCache,
    opts: &RunOptions,
) -> Result<PasRun> {
    task.validate()?;
    let corpus = &task.corpus;
    let mut matrix = AssignmentMatrix::new(corpus.iter().map(|s| s.id.clone()).collect());
    let stats = AssignStats::default();
    let mut selection: Option<SelectionSolution> = None;
    let mut records = Vec::new();

    for iteration in 0..task.iterations {
        let focus: Vec<&Sample> = match (&selection, iteration) {
            (_, 0) => corpus.iter().collect(),
            (Some(sel), _) => rows_to_samples(corpus, sel.uncovered_rows()),
            (None, _) => rows_to_samples(corpus, unsupported_rows(&matrix)),
        };
        if focus.is_empty() {
            break;
        }
        let outcome = propose_candidates(
            task,
            &focus,
            &backends.proposer,
            iteration,
            matrix.column_meta(),
            opts.exec,
        )?;
        let grew = !outcome.new.is_empty();
        if grew {
            extend_matrix(
                &mut matrix,
                corpus,
                &outcome.new,
                &backends.assigner,
                cache,
                &stats,
                opts.exec,
            )?;
            if matrix.n_cols() >= task.k {
                selection = Some(select(&matrix, task.k, task.lambda, opts.solver)?);
            }
        }
        let uncovered = selection.as_ref().map(|s| s.uncovered_rows().len());
        log::info!(
            "iteration {iteration}: focus {}, {} new candidates, pool {}, uncovered {:?}",
            focus.len(),
            outcome.new.len(),
            matrix.n_cols(),
            uncovered
        );
        records.push(IterationRecord {
            iteration,
            focus: focus.len(),
            prompts: outcome.prompts,
            new_candidates: outcome.new.len(),
            pool_size: matrix.n_cols(),
            uncovered,
            objective: selection.as_ref().map(|s| s.objective),
        });
        if !grew || uncovered == Some(0) {
            break;
        }
    }

    let selection = match selection {
        Some(s) => s,
        None if opts.allow_fewer && matrix.n_cols() > 0 => {
            log::warn!(
                "pool of {} is smaller than K = {}; selecting all",
                matrix.n_cols(),
                task.k
            );
            select(&matrix, matrix.n_cols(), task.lambda, opts.solver)?
        }
        None => {
            return Err(Error::PoolTooSmall {
                pool: matrix.n_cols(),
                k: task.k,
            })
        }
    };

    let mut clusters = ClusterSet::from_selection(&matrix, &selection);
    let mut diagnostics = RunDiagnostics {
        assign_calls: stats.backend_calls(),
        assign_cache_hits: stats.cache_hits(),
        unparsed_assignments: stats.unparsed(),
        ..Default::default()
    };
    if opts.commit {
        let report = commit(
            &mut clusters,
            corpus,
            &matrix,
            &selection,
            backends.committer.as_ref(),
            opts.exec,
        )?;
        diagnostics.commit_calls = report.calls;
        diagnostics.commit_fallbacks = report.fallbacks;
    }
    Ok(PasRun {
        matrix,
        selection,
        clusters,
        iterations: records,
        diagnostics,
    })
}

/// Renders the commitment prompt for one sample.
pub fn build_commit_prompt(explanations: &[&str], sample_text: &str) -> String {
    let mut p = String::new();
    for (i, e) in explanations.iter().enumerate() {
        p.push_str(&format!("Predicate {i}: {}\n", one_line(e)));
    }
    p.push_str(&format!(
        "Text: {}.\nChoose the Predicate the matches the Text the most. Answer with \"Predicate <number>\".",
        one_line(sample_text)
    ));
    p
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Reads the chosen predicate index out of a commitment response.
pub fn parse_commit(response: &str) -> Option<usize> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?i)predicate\s*#?\s*(\d+)").unwrap());
    if let Some(c) = re.captures(response) {
        return c[1].parse().ok();
    }
    let digits: String = response
        .trim_start()
        .chars()
        .take_while(|c| c.is_ascii_digit())
        .collect();
    digits.parse().ok()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommitReport {
    pub calls: usize,
    /// Samples resolved by the fallback rule because the committer's answer
    /// was missing, unparseable or not among the supporting clusters.
    pub fallbacks: usize,
}

/// Maps every sample to exactly one selected cluster. A sample supported by
/// a single cluster goes there. Otherwise the committer picks among the
/// supporting clusters (all clusters when none supports it). Without a
/// usable answer, the supporter with the fewest members wins (lowest index
/// on ties), and an unsupported sample goes to cluster 0.
pub fn commit(
    clusters: &mut ClusterSet,
    corpus: &[Sample],
    matrix: &AssignmentMatrix,
    selection: &SelectionSolution,
    committer: Option<&BackendHandle>,
    exec: Execution,
) -> Result<CommitReport> {
    let selected = selection.selected_indices();
    if selected.is_empty() {
        return Err(Error::InvalidInput(
            "cannot commit an empty selection".into(),
        ));
    }
    let sizes: Vec<usize> = clusters.clusters.iter().map(|c| c.members.len()).collect();
    let texts: Vec<&str> = clusters
        .clusters
        .iter()
        .map(|c| c.explanation.text.as_str())
        .collect();

    let supporters: Vec<Vec<usize>> = (0..matrix.n_samples())
        .map(|x| {
            selected
                .iter()
                .enumerate()
                .filter(|&(_, &j)| matrix.get(x, j))
                .map(|(c, _)| c)
                .collect()
        })
        .collect();
    let fallback = |sup: &[usize]| -> usize {
        sup.iter()
            .copied()
            .min_by_key(|&c| (sizes[c], c))
            .unwrap_or(0)
    };

    let pending: Vec<usize> = (0..matrix.n_samples())
        .filter(|&x| supporters[x].len() != 1)
        .collect();
    let answers: Vec<Option<usize>> = match committer {
        Some(backend) => exec.try_map(&pending, |&x| -> Result<Option<usize>> {
            let options: Vec<usize> = if supporters[x].is_empty() {
                (0..texts.len()).collect()
            } else {
                supporters[x].clone()
            };
            let shown: Vec<&str> = options.iter().map(|&c| texts[c]).collect();
            let prompt = build_commit_prompt(&shown, &corpus[x].text);
            let response =
                backend.complete(&CompletionRequest::new(prompt, COMMIT_MAX_TOKENS, 0.0))?;
            Ok(parse_commit(&response).and_then(|i| options.get(i).copied()))
        })?,
        None => vec![None; pending.len()],
    };

    let mut report = CommitReport {
        calls: if committer.is_some() {
            pending.len()
        } else {
            0
        },
        fallbacks: 0,
    };
    let mut map = BTreeMap::new();
    let ids = matrix.sample_ids();
    for (x, sup) in supporters.iter().enumerate() {
        if sup.len() == 1 {
            map.insert(ids[x].clone(), sup[0]);
        }
    }
    for (x, answer) in pending.into_iter().zip(answers) {
        let c = match answer {
            Some(c) => c,
            None => {
                report.fallbacks += 1;
                fallback(&supporters[x])
            }
        };
        map.insert(ids[x].clone(), c);
    }
    if report.fallbacks > 0 {
        log::warn!(
            "commitment: {} samples resolved by the fallback rule",
            report.fallbacks
        );
    }
    clusters.committed = Some(map);
    Ok(report)
}

/// Seed for the child run under `parent_seed` at position `index`.
pub(crate) fn child_seed(parent_seed: u64, depth: usize, index: usize) -> u64 {
    let mix = ((depth as u64) << 32 | index as u64).wrapping_add(1);
    parent_seed ^ mix.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaxonomyOptions {
    pub max_depth: usize,
    /// A cluster is refined only when it has more members than this.
    pub split_threshold: usize,
}

impl Default for TaxonomyOptions {
    fn default() -> Self {
        Self {
            max_depth: 2,
            split_threshold: 20,
        }
    }
}

/// Builds a cluster tree: the depth-1 level is a plain run on the full task;
/// each child cluster larger than the split threshold is clustered again on
/// its own members with a goal narrowed to the parent's category, until the
/// maximum depth. The root is always expanded.
pub fn build_taxonomy(
    task: &ClusteringTask,
    backends: &Backends,
    cache: &JudgmentCache,
    opts: &RunOptions,
    tax: &TaxonomyOptions,
) -> Result<TaxonomyNode> {
    if tax.max_depth < 1 {
        return Err(Error::InvalidInput("max depth must be ≥ 1".into()));
    }
    task.validate()?;
    let run_opts = RunOptions {
        commit: false,
        ..*opts
    };
    let mut root = TaxonomyNode {
        explanation: Explanation::new(Explanation::ROOT),
        members: task.corpus.iter().map(|s| s.id.clone()).collect(),
        children: Vec::new(),
        depth: 0,
    };
    root.children = expand(task, backends, cache, &run_opts, tax, 0)?.unwrap_or_default();
    Ok(root)
}

fn expand(
    task: &ClusteringTask,
    backends: &Backends,
    cache: &JudgmentCache,
    opts: &RunOptions,
    tax: &TaxonomyOptions,
    depth: usize,
) -> Result<Option<Vec<TaxonomyNode>>> {
    let run = match run_pas(task, backends, cache, opts) {
        Ok(r) => r,
        Err(Error::PoolTooSmall { pool: 0, .. }) if depth > 0 => {
            log::warn!("no candidates proposed at depth {}; leaving a leaf", depth);
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    // A single cluster holding the whole subset does not refine its parent.
    if depth > 0
        && run.clusters.clusters.len() == 1
        && run.clusters.clusters[0].members.len() == task.corpus.len()
    {
        return Ok(None);
    }
    let mut children = Vec::with_capacity(run.clusters.clusters.len());
    for (i, cluster) in run.clusters.clusters.into_iter().enumerate() {
        let mut node = TaxonomyNode {
            explanation: cluster.explanation,
            members: cluster.members,
            children: Vec::new(),
            depth: depth + 1,
        };
        if node.members.len() > tax.split_threshold && depth + 1 < tax.max_depth {
            let sub = child_task(task, &node.members, &node.explanation.text, depth + 1, i)?;
            let sub_opts = RunOptions {
                allow_fewer: true,
                ..*opts
            };
            node.children =
                expand(&sub, backends, cache, &sub_opts, tax, depth + 1)?.unwrap_or_default();
        }
        children.push(node);
    }
    Ok(Some(children))
}

fn child_task(
    parent: &ClusteringTask,
    members: &BTreeSet<String>,
    explanation: &str,
    depth: usize,
    index: usize,
) -> Result<ClusteringTask> {
    let corpus: Vec<Sample> = parent
        .corpus
        .iter()
        .filter(|s| members.contains(&s.id))
        .cloned()
        .collect();
    Ok(ClusteringTask {
        corpus,
        goal: augment_goal(&parent.goal, explanation)?,
        seed: child_seed(parent.seed, depth, index),
        ..parent.clone_config()
    })
}

impl ClusteringTask {
    /// The task's hyperparameters with an empty corpus.
    pub fn clone_config(&self) -> ClusteringTask {
        ClusteringTask {
            corpus: Vec::new(),
            goal: self.goal.clone(),
            ..*self
        }
    }
}
