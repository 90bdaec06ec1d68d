//! Domain types shared by every stage of the pipeline.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One text sample of the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub text: String,
    /// Reference class, when the corpus is labeled.
    #[serde(
        rename = "labels",
        alias = "label",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub ref_label: Option<String>,
    /// Hidden attributes (dimension -> value). Only backends and evaluation
    /// may look at these; the propose/assign/select stages never do.
    #[serde(rename = "attrs", default, skip_serializing_if = "Option::is_none")]
    pub hidden_attrs: Option<BTreeMap<String, String>>,
}

impl Sample {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            ref_label: None,
            hidden_attrs: None,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.ref_label = Some(label.into());
        self
    }

    pub fn attr(&self, dim: &str) -> Option<&str> {
        self.hidden_attrs
            .as_ref()
            .and_then(|a| a.get(dim))
            .map(String::as_str)
    }
}

/// Proposal prompt flavour.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    #[default]
    Simple,
    Detailed,
}

impl std::str::FromStr for TemplateKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "simple" => Ok(Self::Simple),
            "detailed" => Ok(Self::Detailed),
            other => Err(format!(
                "unknown template `{other}` (expected simple|detailed)"
            )),
        }
    }
}

/// A corpus, a goal and the hyperparameters of one clustering run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringTask {
    pub corpus: Vec<Sample>,
    pub goal: String,
    /// Number of clusters to select.
    pub k: usize,
    /// Overlap penalty weight.
    pub lambda: f64,
    /// Target size of the candidate pool.
    pub j_total: usize,
    /// Explanations requested per proposal prompt.
    pub j_per_prompt: usize,
    pub iterations: usize,
    /// Proposer context window, in length units (see `propose::LengthUnit`).
    pub context_budget: usize,
    /// Upper bound on proposal prompts issued per iteration.
    pub max_prompts: usize,
    pub template: TemplateKind,
    pub seed: u64,
}

impl ClusteringTask {
    pub const DEFAULT_LAMBDA: f64 = 0.5;
    pub const DEFAULT_J: usize = 30;
    pub const DEFAULT_J_PER_PROMPT: usize = 8;
    pub const DEFAULT_ITERATIONS: usize = 5;
    pub const DEFAULT_CONTEXT_BUDGET: usize = 4096;
    pub const DEFAULT_MAX_PROMPTS: usize = 8;

    pub fn new(corpus: Vec<Sample>, goal: impl Into<String>, k: usize) -> Self {
        Self {
            corpus,
            goal: goal.into(),
            k,
            lambda: Self::DEFAULT_LAMBDA,
            j_total: Self::DEFAULT_J,
            j_per_prompt: Self::DEFAULT_J_PER_PROMPT,
            iterations: Self::DEFAULT_ITERATIONS,
            context_budget: Self::DEFAULT_CONTEXT_BUDGET,
            max_prompts: Self::DEFAULT_MAX_PROMPTS,
            template: TemplateKind::Simple,
            seed: 0,
        }
    }

    /// Candidates to collect per iteration: `ceil(J / iterations)`.
    pub fn per_iteration_quota(&self) -> usize {
        self.j_total.div_ceil(self.iterations.max(1))
    }
}

/// Checks every task invariant and returns the task unchanged when they all
/// hold. All violations are reported at once.
pub fn validate_task(task: ClusteringTask) -> Result<ClusteringTask> {
    task.validate()?;
    Ok(task)
}

impl ClusteringTask {
    /// Borrowing form of [`validate_task`].
    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidTask(problems))
        }
    }

    fn problems(&self) -> Vec<String> {
        let task = self;
        let mut problems = Vec::new();
        if task.k < 1 {
            problems.push("k must be ≥ 1".to_string());
        }
        if task.j_total < task.k {
            problems.push(format!(
                "j_total: candidate pool smaller than K ({} < {})",
                task.j_total, task.k
            ));
        }
        if !(task.lambda >= 0.0 && task.lambda.is_finite()) {
            problems.push(format!(
                "lambda must be a finite value ≥ 0 (got {})",
                task.lambda
            ));
        }
        if task.iterations < 1 {
            problems.push("iterations must be ≥ 1".to_string());
        }
        if task.j_per_prompt < 1 {
            problems.push("j_per_prompt must be ≥ 1".to_string());
        }
        if task.context_budget < 1 {
            problems.push("context_budget must be ≥ 1".to_string());
        }
        if task.max_prompts < 1 {
            problems.push("max_prompts must be ≥ 1".to_string());
        }
        if task.goal.trim().is_empty() {
            problems.push("goal must be non-empty".to_string());
        }
        if task.corpus.is_empty() {
            problems.push("corpus must be non-empty".to_string());
        }
        let mut seen = HashSet::new();
        for s in &task.corpus {
            if !seen.insert(s.id.as_str()) {
                problems.push(format!("corpus: duplicate sample id `{}`", s.id));
            }
            if s.text.trim().is_empty() {
                problems.push(format!("corpus: sample `{}` has empty text", s.id));
            }
        }
        problems
    }
}

/// Where a candidate explanation came from.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Origin {
    pub iteration: usize,
    pub prompt: usize,
    pub position: usize,
}

/// A natural-language predicate over a single sample.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Explanation {
    pub text: String,
    #[serde(default)]
    pub origin: Origin,
}

impl Explanation {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            origin: Origin::default(),
        }
    }

    pub fn with_origin(text: impl Into<String>, origin: Origin) -> Self {
        Self {
            text: text.into(),
            origin,
        }
    }

    pub const ROOT: &'static str = "ROOT";
}

/// Binary `|X| x J` matrix of predicate-supports-sample verdicts, stored
/// column-major so that new candidate columns can be appended cheaply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentMatrix {
    sample_ids: Vec<String>,
    columns: Vec<Explanation>,
    data: Vec<Vec<bool>>,
}

impl AssignmentMatrix {
    pub fn new(sample_ids: Vec<String>) -> Self {
        Self {
            sample_ids,
            columns: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Builds a matrix from columns of verdicts (`cols[j][x]`).
    pub fn from_columns(
        sample_ids: Vec<String>,
        columns: Vec<Explanation>,
        cols: Vec<Vec<bool>>,
    ) -> Result<Self> {
        if columns.len() != cols.len() {
            return Err(Error::InvalidInput(format!(
                "{} column explanations for {} verdict columns",
                columns.len(),
                cols.len()
            )));
        }
        let mut m = Self::new(sample_ids);
        for (e, c) in columns.into_iter().zip(cols) {
            m.push_column(e, c)?;
        }
        Ok(m)
    }

    /// Convenience constructor for tests and fixtures: each column is the list
    /// of supported row indices. Sample ids become `x0..x{n-1}`, columns `e0..`.
    pub fn from_supports(n_samples: usize, supports: &[Vec<usize>]) -> Self {
        let ids = (0..n_samples).map(|i| format!("x{i}")).collect();
        let mut m = Self::new(ids);
        for (j, rows) in supports.iter().enumerate() {
            let mut col = vec![false; n_samples];
            for &r in rows {
                col[r] = true;
            }
            m.push_column(Explanation::new(format!("e{j}")), col)
                .expect("column length matches");
        }
        m
    }

    pub fn push_column(&mut self, explanation: Explanation, column: Vec<bool>) -> Result<()> {
        if column.len() != self.sample_ids.len() {
            return Err(Error::InvalidInput(format!(
                "column `{}` has {} entries for {} samples",
                explanation.text,
                column.len(),
                self.sample_ids.len()
            )));
        }
        self.columns.push(explanation);
        self.data.push(column);
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn column_meta(&self) -> &[Explanation] {
        &self.columns
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[col][row]
    }

    pub fn column(&self, col: usize) -> &[bool] {
        &self.data[col]
    }

    /// Row indices supported by column `col`.
    pub fn column_rows(&self, col: usize) -> Vec<usize> {
        self.data[col]
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn column_sum(&self, col: usize) -> usize {
        self.data[col].iter().filter(|&&b| b).count()
    }

    /// `m = A sᵀ` for a selection vector `s`.
    pub fn inclusion_counts(&self, selected: &[bool]) -> Vec<u32> {
        let mut m = vec![0u32; self.n_samples()];
        for (j, _) in selected.iter().enumerate().filter(|(_, &s)| s) {
            for (x, &b) in self.data[j].iter().enumerate() {
                if b {
                    m[x] += 1;
                }
            }
        }
        m
    }

    /// Restricts the matrix to a subset of columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        Self {
            sample_ids: self.sample_ids.clone(),
            columns: cols.iter().map(|&j| self.columns[j].clone()).collect(),
            data: cols.iter().map(|&j| self.data[j].clone()).collect(),
        }
    }
}

/// How the number of selected clusters is controlled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Exactly `k` columns.
    ConstrainedK { k: usize },
    /// Any number of columns, each costing `cost`.
    Penalized { cost: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    ExactIlp,
    Exhaustive,
    Greedy,
}

impl std::str::FromStr for SolverKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "exact-ilp" | "exact" | "ilp" => Ok(Self::ExactIlp),
            "exhaustive" => Ok(Self::Exhaustive),
            "greedy" => Ok(Self::Greedy),
            other => Err(format!(
                "unknown solver `{other}` (expected exact-ilp|exhaustive|greedy)"
            )),
        }
    }
}

/// Result of the selection stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSolution {
    pub selected: Vec<bool>,
    pub inclusion_counts: Vec<u32>,
    pub objective: f64,
    #[serde(flatten)]
    pub mode: SelectionMode,
    pub lambda: f64,
    pub solver: SolverKind,
}

impl SelectionSolution {
    pub fn selected_indices(&self) -> Vec<usize> {
        self.selected
            .iter()
            .enumerate()
            .filter_map(|(j, &s)| s.then_some(j))
            .collect()
    }

    pub fn uncovered_rows(&self) -> Vec<usize> {
        self.inclusion_counts
            .iter()
            .enumerate()
            .filter_map(|(x, &m)| (m == 0).then_some(x))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub explanation: Explanation,
    pub members: BTreeSet<String>,
}

/// The K output clusters with their explanations.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub clusters: Vec<Cluster>,
    pub uncovered: BTreeSet<String>,
    /// Sample id -> index into `clusters`, once every sample is committed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub committed: Option<BTreeMap<String, usize>>,
}

impl ClusterSet {
    /// Builds the pre-commitment cluster set of a selection.
    pub fn from_selection(matrix: &AssignmentMatrix, selection: &SelectionSolution) -> Self {
        let ids = matrix.sample_ids();
        let clusters = selection
            .selected_indices()
            .into_iter()
            .map(|j| Cluster {
                explanation: matrix.column_meta()[j].clone(),
                members: matrix
                    .column_rows(j)
                    .into_iter()
                    .map(|x| ids[x].clone())
                    .collect(),
            })
            .collect();
        let uncovered = selection
            .uncovered_rows()
            .into_iter()
            .map(|x| ids[x].clone())
            .collect();
        Self {
            clusters,
            uncovered,
            committed: None,
        }
    }

    /// Member sets after commitment, or the raw member sets when uncommitted.
    pub fn partition(&self) -> Vec<BTreeSet<String>> {
        match &self.committed {
            Some(map) => {
                let mut out = vec![BTreeSet::new(); self.clusters.len()];
                for (id, &c) in map {
                    out[c].insert(id.clone());
                }
                out
            }
            None => self.clusters.iter().map(|c| c.members.clone()).collect(),
        }
    }
}

/// A node of an explanation taxonomy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyNode {
    pub explanation: Explanation,
    pub members: BTreeSet<String>,
    pub children: Vec<TaxonomyNode>,
    pub depth: usize,
}

impl TaxonomyNode {
    pub fn height(&self) -> usize {
        self.children
            .iter()
            .map(|c| 1 + c.height())
            .max()
            .unwrap_or(0)
    }

    /// Indented text rendering, parents above their children.
    pub fn render(&self) -> String {
        let mut out = String::new();
        self.render_into(&mut out, 0);
        out
    }

    fn render_into(&self, out: &mut String, indent: usize) {
        out.push_str(&"  ".repeat(indent));
        out.push_str(&format!(
            "- {} ({})\n",
            self.explanation.text,
            self.members.len()
        ));
        for c in &self.children {
            c.render_into(out, indent + 1);
        }
    }
}

/// Reference clusters for evaluation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceLabels {
    pub classes: BTreeMap<String, BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanations: Option<BTreeMap<String, String>>,
}

impl ReferenceLabels {
    /// Groups the labeled samples of a corpus by `ref_label`.
    pub fn from_labels(corpus: &[Sample]) -> Self {
        Self::group(corpus.iter().filter_map(|s| {
            s.ref_label
                .as_deref()
                .map(|l| (l.to_string(), s.id.clone()))
        }))
    }

    /// Groups samples by one of their hidden attributes.
    pub fn from_attr(corpus: &[Sample], dim: &str) -> Self {
        Self::group(
            corpus
                .iter()
                .filter_map(|s| s.attr(dim).map(|v| (v.to_string(), s.id.clone()))),
        )
    }

    fn group(pairs: impl Iterator<Item = (String, String)>) -> Self {
        let mut classes: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (class, id) in pairs {
            classes.entry(class).or_default().insert(id);
        }
        Self {
            classes,
            explanations: None,
        }
    }

    /// All labeled sample ids.
    pub fn labeled(&self) -> BTreeSet<String> {
        self.classes.values().flatten().cloned().collect()
    }

    /// Keeps only the given sample ids; classes that become empty are dropped.
    pub fn restrict(&self, keep: &BTreeSet<String>) -> Self {
        let classes = self
            .classes
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    v.intersection(keep).cloned().collect::<BTreeSet<_>>(),
                )
            })
            .filter(|(_, v)| !v.is_empty())
            .collect();
        Self {
            classes,
            explanations: self.explanations.clone(),
        }
    }

    /// `true` when no sample belongs to two classes.
    pub fn is_partition(&self) -> bool {
        let mut seen = HashSet::new();
        self.classes.values().flatten().all(|id| seen.insert(id))
    }
}
