//! Synthetic corpora with planted attributes, corpus perturbations, corpus
//! JSONL IO and run artifacts.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assign::SparseMatrix;
use crate::backend::marker;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::pipeline::IterationRecord;
use crate::types::{
    AssignmentMatrix, ClusterSet, ClusteringTask, Explanation, ReferenceLabels, Sample,
    SelectionSolution, TaxonomyNode, TemplateKind,
};

pub const FORMAT: u32 = 1;

/// A planted attribute dimension and its values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub values: Vec<String>,
}

impl Dimension {
    pub fn new(name: &str, values: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            values: values.iter().map(|v| v.to_string()).collect(),
        }
    }
}

/// Three dimensions of four values each.
pub fn default_dimensions() -> Vec<Dimension> {
    vec![
        Dimension::new("topic", &["sports", "technology", "cooking", "travel"]),
        Dimension::new("style", &["formal", "casual", "poetic", "humorous"]),
        Dimension::new("language", &["english", "french", "spanish", "german"]),
    ]
}

const FILLER: &[&str] = &[
    "the",
    "a",
    "story",
    "about",
    "some",
    "day",
    "when",
    "people",
    "found",
    "new",
    "ways",
    "to",
    "share",
    "ideas",
    "with",
    "friends",
    "over",
    "long",
    "evenings",
    "and",
    "quiet",
    "mornings",
    "while",
    "others",
    "watched",
    "from",
    "afar",
    "wondering",
    "what",
    "would",
    "happen",
    "next",
    "in",
    "small",
    "towns",
    "near",
    "rivers",
    "under",
    "bright",
    "skies",
];

fn filler(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n)
        .map(|_| *FILLER.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty()
        || s.chars()
            .any(|c| c.is_whitespace() || matches!(c, '⟦' | '⟧' | '='))
    {
        return Err(Error::InvalidInput(format!(
            "{kind} `{s}` must be non-empty without whitespace, `=`, `⟦` or `⟧`"
        )));
    }
    Ok(())
}

/// Generates `per_combination` samples for every combination of dimension
/// values. Each text carries one marker per dimension between seeded filler
/// words. With `label_dim`, the sample's reference label is its value on
/// that dimension.
pub fn generate_synthetic(
    dims: &[Dimension],
    per_combination: usize,
    seed: u64,
    label_dim: Option<&str>,
) -> Result<Vec<Sample>> {
    if dims.is_empty() {
        return Err(Error::InvalidInput(
            "at least one dimension is required".into(),
        ));
    }
    if per_combination == 0 {
        return Err(Error::InvalidInput(
            "samples per combination must be ≥ 1".into(),
        ));
    }
    let mut names = HashSet::new();
    for d in dims {
        check_token("dimension", &d.name)?;
        if !names.insert(d.name.as_str()) {
            return Err(Error::InvalidInput(format!(
                "duplicate dimension `{}`",
                d.name
            )));
        }
        if d.values.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "dimension `{}` needs at least 2 values",
                d.name
            )));
        }
        let mut seen = HashSet::new();
        for v in &d.values {
            check_token("value", v)?;
            if !seen.insert(v.to_lowercase()) {
                return Err(Error::InvalidInput(format!(
                    "duplicate value `{v}` in `{}`",
                    d.name
                )));
            }
        }
    }
    if let Some(l) = label_dim {
        if !names.contains(l) {
            return Err(Error::InvalidInput(format!(
                "unknown label dimension `{l}`"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let combos = dims.iter().map(|d| d.values.len()).product::<usize>();
    let mut out = Vec::with_capacity(combos * per_combination);
    let mut idx = vec![0usize; dims.len()];
    for _ in 0..combos {
        for _ in 0..per_combination {
            let mut text = String::new();
            let mut attrs = BTreeMap::new();
            for (d, &i) in dims.iter().zip(&idx) {
                let v = &d.values[i];
                let n = 2 + (rand::Rng::gen_range(&mut rng, 0..3));
                text.push_str(&filler(&mut rng, n));
                text.push(' ');
                text.push_str(&marker(&d.name, v));
                text.push(' ');
                attrs.insert(d.name.clone(), v.clone());
            }
            text.push_str(&filler(&mut rng, 3));
            text.push('.');
            let mut s = Sample::new(format!("syn-{:05}", out.len()), text);
            if let Some(l) = label_dim {
                s.ref_label = Some(attrs[l].clone());
            }
            s.hidden_attrs = Some(attrs);
            out.push(s);
        }
        for (d, i) in dims.iter().zip(idx.iter_mut()).rev() {
            *i += 1;
            if *i < d.values.len() {
                break;
            }
            *i = 0;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Imbalanced {
    pub corpus: Vec<Sample>,
    /// Classes reduced to half their size.
    pub halved: Vec<String>,
    /// Of those, the classes halved a second time.
    pub quartered: Vec<String>,
}

fn pick_classes(names: &[String], n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut picked: Vec<usize> = index::sample(rng, names.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| names[i].clone()).collect()
}

fn drop_random(members: &BTreeSet<String>, n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let ids: Vec<&String> = members.iter().collect();
    index::sample(rng, ids.len(), n)
        .into_iter()
        .map(|i| ids[i].clone())
        .collect()
}

/// Halves 7 randomly chosen reference classes, then halves 3 of those again.
pub fn perturb_imbalance(
    corpus: &[Sample],
    refs: &ReferenceLabels,
    seed: u64,
) -> Result<Imbalanced> {
    let names: Vec<String> = refs.classes.keys().cloned().collect();
    if names.len() < 7 {
        return Err(Error::InvalidInput(format!(
            "imbalance needs at least 7 reference classes, got {}",
            names.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let halved = pick_classes(&names, 7, &mut rng);
    let quartered = pick_classes(&halved, 3, &mut rng);
    let mut removed: HashSet<String> = HashSet::new();
    for c in &halved {
        let members = &refs.classes[c];
        removed.extend(drop_random(members, members.len() / 2, &mut rng));
    }
    for c in &quartered {
        let left: BTreeSet<String> = refs.classes[c]
            .iter()
            .filter(|id| !removed.contains(*id))
            .cloned()
            .collect();
        removed.extend(drop_random(&left, left.len() / 2, &mut rng));
    }
    Ok(Imbalanced {
        corpus: corpus
            .iter()
            .filter(|s| !removed.contains(&s.id))
            .cloned()
            .collect(),
        halved,
        quartered,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Noisy {
    pub corpus: Vec<Sample>,
    pub noise_classes: Vec<String>,
    /// Ids that take part in evaluation (members of non-noise classes).
    pub eval_ids: BTreeSet<String>,
}

/// Shrinks 4 randomly chosen reference classes to an eighth of their size;
/// their remaining samples act as noise and are excluded from evaluation.
pub fn perturb_noise(corpus: &[Sample], refs: &ReferenceLabels, seed: u64) -> Result<Noisy> {
    let names: Vec<String> = refs.classes.keys().cloned().collect();
    if names.len() < 5 {
        return Err(Error::InvalidInput(format!(
            "noise needs at least 5 reference classes, got {}",
            names.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise_classes = pick_classes(&names, 4, &mut rng);
    let mut removed: HashSet<String> = HashSet::new();
    for c in &noise_classes {
        let members = &refs.classes[c];
        removed.extend(drop_random(members, members.len() * 7 / 8, &mut rng));
    }
    let corpus: Vec<Sample> = corpus
        .iter()
        .filter(|s| !removed.contains(&s.id))
        .cloned()
        .collect();
    let eval_ids = refs
        .classes
        .iter()
        .filter(|(k, _)| !noise_classes.contains(k))
        .flat_map(|(_, v)| v.iter().cloned())
        .filter(|id| !removed.contains(id))
        .collect();
    Ok(Noisy {
        corpus,
        noise_classes,
        eval_ids,
    })
}

#[derive(Deserialize)]
struct RawSample {
    id: Option<serde_json::Value>,
    text: Option<String>,
    #[serde(alias = "label")]
    labels: Option<String>,
    attrs: Option<BTreeMap<String, String>>,
}

/// Reads a JSONL corpus (`{"id", "text", "labels"?, "attrs"?}` per line).
/// Blank lines are skipped; errors carry the 1-based line number.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let malformed = |line: usize, message: String| Error::Malformed {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample =
            serde_json::from_str(line).map_err(|e| malformed(i + 1, e.to_string()))?;
        let id = match raw.id {
            Some(serde_json::Value::String(s)) => s,
            Some(serde_json::Value::Number(n)) => n.to_string(),
            Some(_) => return Err(malformed(i + 1, "`id` must be a string or number".into())),
            None => return Err(malformed(i + 1, "missing `id` field".into())),
        };
        let text = raw
            .text
            .ok_or_else(|| malformed(i + 1, "missing `text` field".into()))?;
        if text.trim().is_empty() {
            return Err(malformed(i + 1, format!("sample `{id}` has empty text")));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        out.push(Sample {
            id,
            text,
            ref_label: raw.labels,
            hidden_attrs: raw.attrs,
        });
    }
    Ok(out)
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &[Sample]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = String::new();
    for s in corpus {
        buf.push_str(&serde_json::to_string(s)?);
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// A JSON document tagged with the artifact format version.
#[derive(Debug, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub format: u32,
    #[serde(flatten)]
    pub inner: T,
}

/// Task hyperparameters as written to `task.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub goal: String,
    pub k: usize,
    pub lambda: f64,
    pub j_total: usize,
    pub j_per_prompt: usize,
    pub iterations: usize,
    pub context_budget: usize,
    pub max_prompts: usize,
    pub template: TemplateKind,
    pub seed: u64,
    pub corpus_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_path: Option<String>,
}

impl TaskConfig {
    pub fn of(task: &ClusteringTask, corpus_path: Option<String>) -> Self {
        Self {
            goal: task.goal.clone(),
            k: task.k,
            lambda: task.lambda,
            j_total: task.j_total,
            j_per_prompt: task.j_per_prompt,
            iterations: task.iterations,
            context_budget: task.context_budget,
            max_prompts: task.max_prompts,
            template: task.template,
            seed: task.seed,
            corpus_size: task.corpus.len(),
            corpus_path,
        }
    }
}

#[derive(Serialize)]
struct PoolLine<'a> {
    format: u32,
    index: usize,
    #[serde(flatten)]
    explanation: &'a Explanation,
}

#[derive(Serialize)]
struct IterationsFile<'a> {
    iterations: &'a [IterationRecord],
}

/// The pieces of a run to write; absent pieces are skipped.
#[derive(Debug, Default)]
pub struct RunArtifacts<'a> {
    pub task: Option<&'a ClusteringTask>,
    pub corpus_path: Option<String>,
    pub matrix: Option<&'a AssignmentMatrix>,
    pub selection: Option<&'a SelectionSolution>,
    pub clusters: Option<&'a ClusterSet>,
    pub taxonomy: Option<&'a TaxonomyNode>,
    pub metrics: Option<&'a EvalReport>,
    pub iterations: Option<&'a [IterationRecord]>,
    /// Role -> backend id.
    pub backends: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub config_hash: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub backends: BTreeMap<String, String>,
    pub created_at: String,
    pub files: Vec<String>,
}

fn write_json<T: Serialize>(
    dir: &Path,
    name: &str,
    value: &T,
    files: &mut Vec<String>,
) -> Result<String> {
    let mut text = serde_json::to_string_pretty(&Versioned {
        format: FORMAT,
        inner: value,
    })?;
    text.push('\n');
    let path = dir.join(name);
    fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    files.push(name.to_string());
    Ok(text)
}

/// Writes every present artifact into `dir` (created if needed), then
/// `manifest.json` listing them.
pub fn save_artifacts(dir: impl AsRef<Path>, art: &RunArtifacts<'_>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let mut config_hash = None;
    if let Some(task) = art.task {
        let text = write_json(
            dir,
            "task.json",
            &TaskConfig::of(task, art.corpus_path.clone()),
            &mut files,
        )?;
        let digest = Sha256::digest(text.as_bytes());
        config_hash = Some(digest.iter().map(|b| format!("{b:02x}")).collect());
    }
    if let Some(m) = art.matrix {
        let path = dir.join("pool.jsonl");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for (index, explanation) in m.column_meta().iter().enumerate() {
            let line = serde_json::to_string(&PoolLine {
                format: FORMAT,
                index,
                explanation,
            })?;
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        files.push("pool.jsonl".into());
        let sparse = SparseMatrix::from(m);
        let path = dir.join("matrix.sparse.json");
        fs::write(&path, serde_json::to_string(&sparse)? + "\n")
            .map_err(|e| Error::io(&path, e))?;
        files.push("matrix.sparse.json".into());
    }
    if let Some(s) = art.selection {
        write_json(dir, "selection.json", s, &mut files)?;
    }
    if let Some(c) = art.clusters {
        write_json(dir, "clusters.json", c, &mut files)?;
    }
    if let Some(t) = art.taxonomy {
        write_json(dir, "taxonomy.json", t, &mut files)?;
    }
    if let Some(it) = art.iterations {
        write_json(
            dir,
            "iterations.json",
            &IterationsFile { iterations: it },
            &mut files,
        )?;
    }
    if let Some(m) = art.metrics {
        let path = dir.join("metrics.json");
        fs::write(&path, serde_json::to_string_pretty(m)? + "\n")
            .map_err(|e| Error::io(&path, e))?;
        files.push("metrics.json".into());
    }
    let manifest = Manifest {
        format: FORMAT,
        config_hash,
        seeds: art.seeds.clone(),
        backends: art.backends.clone(),
        created_at: chrono::Utc::now().to_rfc3339(),
        files,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a versioned JSON artifact, rejecting unknown format versions.
pub fn read_artifact<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: Versioned<T> = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if v.format != FORMAT {
        return Err(Error::InvalidInput(format!(
            "{}: unsupported format {} (expected {FORMAT})",
            path.display(),
            v.format
        )));
    }
    Ok(v.inner)
}

/// Path of a named artifact inside an output directory.
pub fn artifact_path(dir: impl AsRef<Path>, name: &str) -> PathBuf {
    dir.as_ref().join(name)
}
