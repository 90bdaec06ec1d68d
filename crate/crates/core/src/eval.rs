//! Scoring against reference labels: exact one-to-one matching, macro F1,
//! coverage/overlap and per-stage scores.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AssignmentMatrix, Cluster, ClusterSet, Explanation, ReferenceLabels};

/// Minimizes `cost` over perfect matchings of a square matrix. Returns the
/// column assigned to each row.
fn hungarian_min(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    const INF: i64 = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    row_to_col
}

fn max_weight_value(w: &[Vec<i64>], rows: &[usize], cols: &[usize]) -> i64 {
    let cost: Vec<Vec<i64>> = rows
        .iter()
        .map(|&r| cols.iter().map(|&c| -w[r][c]).collect())
        .collect();
    let assign = hungarian_min(&cost);
    assign
        .iter()
        .enumerate()
        .map(|(i, &j)| w[rows[i]][cols[j]])
        .sum()
}

/// Maximum-weight one-to-one matching between rows and columns of an
/// `n x m` weight matrix. Returns, for each row, the matched column or `None`
/// when there are more rows than columns. Among optimal matchings the one
/// whose (row, column) pairs are lexicographically smallest is returned.
pub fn max_weight_matching(weights: &[Vec<i64>]) -> Vec<Option<usize>> {
    let n = weights.len();
    let m = weights.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return vec![None; n];
    }
    let s = n.max(m);
    let w: Vec<Vec<i64>> = (0..s)
        .map(|i| {
            (0..s)
                .map(|j| if i < n && j < m { weights[i][j] } else { 0 })
                .collect()
        })
        .collect();
    let all: Vec<usize> = (0..s).collect();
    let best = max_weight_value(&w, &all, &all);

    let mut free_rows: Vec<usize> = all.clone();
    let mut free_cols: Vec<usize> = all;
    let mut fixed = 0i64;
    let mut out = vec![None; n];
    for (i, slot) in out.iter_mut().enumerate() {
        free_rows.retain(|&r| r != i);
        let mut chosen = None;
        for &c in &free_cols {
            let rest: Vec<usize> = free_cols.iter().copied().filter(|&x| x != c).collect();
            let value = fixed + w[i][c] + max_weight_value(&w, &free_rows, &rest);
            if value == best {
                chosen = Some(c);
                break;
            }
        }
        let c = chosen.expect("an optimal completion always exists");
        fixed += w[i][c];
        free_cols.retain(|&x| x != c);
        if c < m {
            *slot = Some(c);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matching {
    /// `pairs[i]` is the index (in `refs.classes` order) of the class
    /// matched to output `i`.
    pub pairs: Vec<Option<usize>>,
    pub total_overlap: usize,
}

/// One-to-one matching of output clusters to reference classes maximizing
/// total overlap.
pub fn hungarian_match(outputs: &[BTreeSet<String>], refs: &ReferenceLabels) -> Matching {
    let weights: Vec<Vec<i64>> = outputs
        .iter()
        .map(|o| {
            refs.classes
                .values()
                .map(|c| o.intersection(c).count() as i64)
                .collect()
        })
        .collect();
    let pairs = max_weight_matching(&weights);
    let total_overlap = pairs
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|c| weights[i][c] as usize))
        .sum();
    Matching {
        pairs,
        total_overlap,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub matched_output: Option<usize>,
    pub overlap: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    /// Mean per-class F1, in percent.
    pub macro_f1: f64,
    pub per_class: Vec<ClassScore>,
}

/// Macro F1 (percent) of output clusters against reference classes after
/// one-to-one matching. Reference classes left unmatched score 0; empty
/// classes are dropped. Precision is measured over labeled samples only.
pub fn macro_f1(outputs: &[BTreeSet<String>], refs: &ReferenceLabels) -> Result<F1Report> {
    let refs = ReferenceLabels {
        classes: refs
            .classes
            .iter()
            .filter(|(name, c)| {
                if c.is_empty() {
                    log::warn!("reference class `{name}` is empty; excluded");
                }
                !c.is_empty()
            })
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
        explanations: None,
    };
    if refs.classes.is_empty() {
        return Err(Error::Eval("no non-empty reference classes".into()));
    }
    let labeled = refs.labeled();
    let matching = hungarian_match(outputs, &refs);
    let mut by_class: BTreeMap<usize, usize> = BTreeMap::new();
    for (o, m) in matching.pairs.iter().enumerate() {
        if let Some(k) = m {
            by_class.insert(*k, o);
        }
    }
    let per_class: Vec<ClassScore> = refs
        .classes
        .iter()
        .enumerate()
        .map(|(k, (name, members))| match by_class.get(&k) {
            Some(&o) => {
                let out = &outputs[o];
                let overlap = out.intersection(members).count();
                let predicted = out.intersection(&labeled).count();
                let precision = ratio(overlap, predicted);
                let recall = ratio(overlap, members.len());
                let f1 = ratio(2 * overlap, predicted + members.len());
                ClassScore {
                    class: name.clone(),
                    matched_output: Some(o),
                    overlap,
                    precision,
                    recall,
                    f1,
                }
            }
            None => ClassScore {
                class: name.clone(),
                matched_output: None,
                overlap: 0,
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
            },
        })
        .collect();
    let macro_f1 = 100.0 * per_class.iter().map(|c| c.f1).sum::<f64>() / per_class.len() as f64;
    Ok(F1Report {
        macro_f1,
        per_class,
    })
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    /// Percent of samples in at least one cluster.
    pub covered_pct: f64,
    /// Percent of samples in exactly one cluster.
    pub exactly_once_pct: f64,
    /// Percent of samples in two or more clusters.
    pub multi_pct: f64,
    pub uncovered: usize,
    pub overlapping: usize,
}

/// Coverage and overlap of (pre-commitment) cluster member sets.
pub fn coverage_overlap(clusters: &[Cluster], corpus_ids: &[String]) -> Coverage {
    let mut counts: BTreeMap<&str, usize> = corpus_ids.iter().map(|id| (id.as_str(), 0)).collect();
    for c in clusters {
        for id in &c.members {
            if let Some(n) = counts.get_mut(id.as_str()) {
                *n += 1;
            }
        }
    }
    let uncovered = counts.values().filter(|&&n| n == 0).count();
    let overlapping = counts.values().filter(|&&n| n > 1).count();
    let total = corpus_ids.len();
    let once = total - uncovered - overlapping;
    Coverage {
        covered_pct: 100.0 * ratio(total - uncovered, total),
        exactly_once_pct: 100.0 * ratio(once, total),
        multi_pct: 100.0 * ratio(overlapping, total),
        uncovered,
        overlapping,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageScore {
    pub class: String,
    /// Percent values.
    pub recall: f64,
    pub specificity: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub per_class: Vec<StageScore>,
    /// Mean class score, in percent.
    pub score: f64,
}

/// Per-class recall and specificity of predicted support sets against the
/// reference classes; `supported[class]` is the predicted member set (absent
/// means empty). The class score is the mean of the two.
pub fn stage_scores(
    refs: &ReferenceLabels,
    supported: &BTreeMap<String, BTreeSet<String>>,
    corpus_ids: &BTreeSet<String>,
) -> Result<StageReport> {
    let empty = BTreeSet::new();
    let per_class = refs
        .classes
        .iter()
        .map(|(name, truth)| {
            if truth.is_empty() {
                return Err(Error::Eval(format!("reference class `{name}` is empty")));
            }
            let rest = corpus_ids.len() - truth.intersection(corpus_ids).count();
            if rest == 0 {
                return Err(Error::Eval(format!(
                    "reference class `{name}` covers the whole corpus; specificity is undefined"
                )));
            }
            let pred = supported.get(name).unwrap_or(&empty);
            let recall = ratio(truth.intersection(pred).count(), truth.len());
            let true_neg = corpus_ids
                .iter()
                .filter(|id| !truth.contains(*id) && !pred.contains(*id))
                .count();
            let recall = 100.0 * recall;
            let specificity = 100.0 * ratio(true_neg, rest);
            Ok(StageScore {
                class: name.clone(),
                recall,
                specificity,
                score: (recall + specificity) / 2.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if per_class.is_empty() {
        return Err(Error::Eval("no reference classes".into()));
    }
    let score = per_class.iter().map(|c| c.score).sum::<f64>() / per_class.len() as f64;
    Ok(StageReport { per_class, score })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolScore {
    /// Mean over classes of the best recall any candidate reaches, in percent.
    pub score: f64,
    /// Distinct candidates that are the best match of some class.
    pub matched_count: usize,
    /// Class -> (candidate index, recall in percent), lowest index on ties.
    pub best: BTreeMap<String, (usize, f64)>,
}

/// Scores a set of candidate clusters (a proposer's pool or a selector's
/// output) by how well the best candidate recalls each reference class.
pub fn proposer_selector_score(
    refs: &ReferenceLabels,
    candidates: &[BTreeSet<String>],
) -> Result<PoolScore> {
    if candidates.is_empty() {
        return Err(Error::Eval("no candidate clusters to score".into()));
    }
    if refs.classes.is_empty() {
        return Err(Error::Eval("no reference classes".into()));
    }
    let mut best = BTreeMap::new();
    for (name, truth) in &refs.classes {
        if truth.is_empty() {
            return Err(Error::Eval(format!("reference class `{name}` is empty")));
        }
        let mut top = (0usize, -1.0f64);
        for (j, cand) in candidates.iter().enumerate() {
            let r = 100.0 * ratio(truth.intersection(cand).count(), truth.len());
            if r > top.1 {
                top = (j, r);
            }
        }
        best.insert(name.clone(), top);
    }
    let score = best.values().map(|&(_, r)| r).sum::<f64>() / best.len() as f64;
    let matched_count = best
        .values()
        .map(|&(j, _)| j)
        .collect::<BTreeSet<_>>()
        .len();
    Ok(PoolScore {
        score,
        matched_count,
        best,
    })
}

/// Uniformly random partition of the corpus into `k` clusters.
pub fn random_baseline(corpus_ids: &[String], k: usize, seed: u64) -> Result<ClusterSet> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..k).collect();
    let mut clusters: Vec<Cluster> = (0..k)
        .map(|i| Cluster {
            explanation: Explanation::new(format!("random cluster {i}")),
            members: BTreeSet::new(),
        })
        .collect();
    let mut committed = BTreeMap::new();
    for id in corpus_ids {
        let c = *labels.choose(&mut rng).expect("k ≥ 1");
        clusters[c].members.insert(id.clone());
        committed.insert(id.clone(), c);
    }
    Ok(ClusterSet {
        clusters,
        uncovered: BTreeSet::new(),
        committed: Some(committed),
    })
}

/// Everything written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: u32,
    /// Macro F1 of the final (committed when available) partition.
    pub macro_f1: f64,
    /// Macro F1 restricted to samples covered by some selected cluster.
    pub macro_f1_covered: Option<f64>,
    pub per_class: Vec<ClassScore>,
    pub coverage: Coverage,
    pub selector: Option<PoolScore>,
    pub proposer: Option<PoolScore>,
    pub total_overlap: usize,
    /// Recall/specificity of each matched output cluster's support set.
    pub matched_stage: Option<StageReport>,
}

/// Evaluates a clustering run. `pool` adds the proposer score over every
/// candidate column.
pub fn evaluate(
    clusters: &ClusterSet,
    corpus_ids: &[String],
    refs: &ReferenceLabels,
    pool: Option<&AssignmentMatrix>,
) -> Result<EvalReport> {
    let final_sets = clusters.partition();
    let f1 = macro_f1(&final_sets, refs)?;

    let covered: BTreeSet<String> = corpus_ids
        .iter()
        .filter(|id| !clusters.uncovered.contains(*id))
        .cloned()
        .collect();
    let macro_f1_covered = if clusters.uncovered.is_empty() {
        None
    } else {
        let restricted: Vec<BTreeSet<String>> = final_sets
            .iter()
            .map(|s| s.intersection(&covered).cloned().collect())
            .collect();
        macro_f1(&restricted, &refs.restrict(&covered))
            .ok()
            .map(|r| r.macro_f1)
    };

    let raw: Vec<BTreeSet<String>> = clusters
        .clusters
        .iter()
        .map(|c| c.members.clone())
        .collect();
    let selector = proposer_selector_score(refs, &raw).ok();
    let proposer = match pool {
        Some(m) => {
            let cols: Vec<BTreeSet<String>> = (0..m.n_cols())
                .map(|j| {
                    m.column_rows(j)
                        .into_iter()
                        .map(|x| m.sample_ids()[x].clone())
                        .collect()
                })
                .collect();
            proposer_selector_score(refs, &cols).ok()
        }
        None => None,
    };

    let supported: BTreeMap<String, BTreeSet<String>> = f1
        .per_class
        .iter()
        .filter_map(|c| c.matched_output.map(|o| (c.class.clone(), raw[o].clone())))
        .collect();
    let ids: BTreeSet<String> = corpus_ids.iter().cloned().collect();
    let matched_stage = stage_scores(refs, &supported, &ids).ok();
    let total_overlap = f1.per_class.iter().map(|c| c.overlap).sum();

    Ok(EvalReport {
        format: 1,
        macro_f1: f1.macro_f1,
        macro_f1_covered,
        per_class: f1.per_class,
        coverage: coverage_overlap(&clusters.clusters, corpus_ids),
        selector,
        proposer,
        total_overlap,
        matched_stage,
    })
}
