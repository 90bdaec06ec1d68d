//! Assignment stage: one assigner verdict per (explanation, sample) pair,
//! assembled into the assignment matrix, with a persistent judgment cache.

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{BackendHandle, CompletionRequest};
use crate::error::{Error, Result, SolverError};
use crate::exec::Execution;
use crate::types::{AssignmentMatrix, Explanation, Sample};

pub const ASSIGNER_TEMPERATURE: f64 = 0.0;
const ASSIGNER_MAX_TOKENS: u32 = 4;

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Renders the yes/no assigner prompt. Whitespace runs (newlines included)
/// in either field are collapsed so that each occupies exactly one line.
pub fn build_assign_prompt(explanation: &str, sample_text: &str) -> Result<String> {
    let e = one_line(explanation);
    let x = one_line(sample_text);
    if e.is_empty() {
        return Err(Error::InvalidInput("empty predicate".into()));
    }
    if x.is_empty() {
        return Err(Error::InvalidInput("empty sample text".into()));
    }
    Ok(format!(
        "Predicate: {e}.\nText: {x}.\nIs the Predicate true on the Text? Yes or No. When uncertain, output No."
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Yes,
    No,
    /// Anything else; counts as "No".
    Unclear,
}

impl Verdict {
    pub fn supports(self) -> bool {
        self == Verdict::Yes
    }
}

/// Case-insensitive match on the leading token.
pub fn parse_assignment(response: &str) -> Verdict {
    let token: String = response
        .trim_start()
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_lowercase();
    match token.as_str() {
        "yes" => Verdict::Yes,
        "no" => Verdict::No,
        _ => Verdict::Unclear,
    }
}

/// Counters for one assignment run.
#[derive(Debug, Default)]
pub struct AssignStats {
    pub backend_calls: AtomicUsize,
    pub cache_hits: AtomicUsize,
    pub unparsed: AtomicUsize,
}

impl AssignStats {
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::SeqCst)
    }

    pub fn unparsed(&self) -> usize {
        self.unparsed.load(Ordering::SeqCst)
    }
}

/// Stable hash of an explanation's text, used in cache keys.
pub fn explanation_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    eh: String,
    sid: String,
    bid: String,
    v: u8,
    ts: i64,
}

type CacheKey = (String, String, String);

/// Append-only judgment store keyed by (explanation hash, sample id,
/// backend id). Optionally backed by a JSONL file; each record is written
/// with a single `write_all` under a lock.
#[derive(Debug, Default)]
pub struct JudgmentCache {
    map: Mutex<HashMap<CacheKey, bool>>,
    file: Option<Mutex<File>>,
}

impl JudgmentCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a cache file and loads its records. A truncated
    /// final line, as left by an aborted run, is skipped.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut map = HashMap::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            let lines: Vec<String> = BufReader::new(f)
                .lines()
                .collect::<std::io::Result<_>>()
                .map_err(|e| Error::io(path, e))?;
            let last = lines.len();
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheRecord>(line) {
                    Ok(r) => {
                        map.insert((r.eh, r.sid, r.bid), r.v != 0);
                    }
                    Err(_) if i + 1 == last => {
                        log::warn!("{}: skipping truncated final record", path.display());
                    }
                    Err(e) => {
                        return Err(Error::Malformed {
                            path: path.display().to_string(),
                            line: i + 1,
                            message: e.to_string(),
                        })
                    }
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            map: Mutex::new(map),
            file: Some(Mutex::new(file)),
        })
    }

    pub fn len(&self) -> usize {
        self.map.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, eh: &str, sid: &str, bid: &str) -> Option<bool> {
        self.map
            .lock()
            .unwrap()
            .get(&(eh.to_string(), sid.to_string(), bid.to_string()))
            .copied()
    }

    pub fn put(&self, eh: &str, sid: &str, bid: &str, verdict: bool) -> Result<()> {
        if let Some(file) = &self.file {
            let rec = CacheRecord {
                eh: eh.to_string(),
                sid: sid.to_string(),
                bid: bid.to_string(),
                v: verdict as u8,
                ts: chrono::Utc::now().timestamp(),
            };
            let mut line = serde_json::to_string(&rec)?;
            line.push('\n');
            file.lock()
                .unwrap()
                .write_all(line.as_bytes())
                .map_err(|e| Error::io("judgment cache", e))?;
        }
        self.map
            .lock()
            .unwrap()
            .insert((eh.to_string(), sid.to_string(), bid.to_string()), verdict);
        Ok(())
    }
}

/// Verdict columns for `pool` over `corpus` (`cols[j][x]`). Cached pairs are
/// reused; the rest go to the backend, in parallel when `exec` allows. On a
/// backend failure nothing is returned, but completed judgments stay cached.
pub fn assign_columns(
    corpus: &[Sample],
    pool: &[Explanation],
    backend: &BackendHandle,
    cache: &JudgmentCache,
    stats: &AssignStats,
    exec: Execution,
) -> Result<Vec<Vec<bool>>> {
    if corpus.is_empty() {
        return Ok(vec![Vec::new(); pool.len()]);
    }
    let bid = backend.id().to_string();
    let hashes: Vec<String> = pool.iter().map(|e| explanation_hash(&e.text)).collect();
    let pairs: Vec<(usize, usize)> = (0..pool.len())
        .flat_map(|j| (0..corpus.len()).map(move |x| (j, x)))
        .collect();
    let verdicts = exec.try_map(&pairs, |&(j, x)| -> Result<bool> {
        let sample = &corpus[x];
        if let Some(v) = cache.get(&hashes[j], &sample.id, &bid) {
            stats.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(v);
        }
        let prompt = build_assign_prompt(&pool[j].text, &sample.text)?;
        let response = backend.complete(&CompletionRequest::new(
            prompt,
            ASSIGNER_MAX_TOKENS,
            ASSIGNER_TEMPERATURE,
        ))?;
        stats.backend_calls.fetch_add(1, Ordering::Relaxed);
        let verdict = parse_assignment(&response);
        if verdict == Verdict::Unclear {
            stats.unparsed.fetch_add(1, Ordering::Relaxed);
        }
        cache.put(&hashes[j], &sample.id, &bid, verdict.supports())?;
        Ok(verdict.supports())
    })?;
    Ok(verdicts
        .chunks(corpus.len())
        .map(<[bool]>::to_vec)
        .collect())
}

/// Builds the full assignment matrix for a candidate pool.
pub fn assign_matrix(
    corpus: &[Sample],
    pool: &[Explanation],
    backend: &BackendHandle,
    cache: &JudgmentCache,
    exec: Execution,
) -> Result<AssignmentMatrix> {
    if pool.is_empty() {
        return Err(Error::InvalidInput("candidate pool is empty".into()));
    }
    let mut m = AssignmentMatrix::new(corpus.iter().map(|s| s.id.clone()).collect());
    extend_matrix(
        &mut m,
        corpus,
        pool,
        backend,
        cache,
        &AssignStats::default(),
        exec,
    )?;
    Ok(m)
}

/// Appends columns for `new_cols` to an existing matrix over the same corpus.
pub fn extend_matrix(
    matrix: &mut AssignmentMatrix,
    corpus: &[Sample],
    new_cols: &[Explanation],
    backend: &BackendHandle,
    cache: &JudgmentCache,
    stats: &AssignStats,
    exec: Execution,
) -> Result<()> {
    debug_assert!(corpus.iter().map(|s| &s.id).eq(matrix.sample_ids().iter()));
    let cols = assign_columns(corpus, new_cols, backend, cache, stats, exec)?;
    for (e, c) in new_cols.iter().zip(cols) {
        matrix.push_column(e.clone(), c)?;
    }
    Ok(())
}

/// Candidate cluster of column `j`: the ids of the samples it supports.
pub fn cluster_of(matrix: &AssignmentMatrix, j: usize) -> Result<BTreeSet<String>, SolverError> {
    if j >= matrix.n_cols() {
        return Err(SolverError::ColumnOutOfRange {
            index: j,
            n_cols: matrix.n_cols(),
        });
    }
    Ok(matrix
        .column_rows(j)
        .into_iter()
        .map(|x| matrix.sample_ids()[x].clone())
        .collect())
}

fn format_one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRepr {
    Text(String),
    Full(Explanation),
}

/// Sparse JSON form of an assignment matrix:
/// `{format, n, m, ones: [[x, j], ...], columns: [...], ids: [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseMatrix {
    #[serde(default = "format_one")]
    pub format: u32,
    pub n: usize,
    pub m: usize,
    pub ones: Vec<[usize; 2]>,
    pub columns: Vec<ColumnRepr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ids: Option<Vec<String>>,
}

impl From<&AssignmentMatrix> for SparseMatrix {
    fn from(a: &AssignmentMatrix) -> Self {
        let mut ones = Vec::new();
        for x in 0..a.n_samples() {
            for j in 0..a.n_cols() {
                if a.get(x, j) {
                    ones.push([x, j]);
                }
            }
        }
        Self {
            format: 1,
            n: a.n_samples(),
            m: a.n_cols(),
            ones,
            columns: a
                .column_meta()
                .iter()
                .cloned()
                .map(ColumnRepr::Full)
                .collect(),
            ids: Some(a.sample_ids().to_vec()),
        }
    }
}

impl TryFrom<SparseMatrix> for AssignmentMatrix {
    type Error = Error;

    fn try_from(s: SparseMatrix) -> Result<Self> {
        if s.columns.len() != s.m {
            return Err(Error::InvalidInput(format!(
                "matrix declares m = {} but lists {} columns",
                s.m,
                s.columns.len()
            )));
        }
        let ids = match s.ids {
            Some(ids) if ids.len() != s.n => {
                return Err(Error::InvalidInput(format!(
                    "matrix declares n = {} but lists {} ids",
                    s.n,
                    ids.len()
                )))
            }
            Some(ids) => ids,
            None => (0..s.n).map(|i| format!("x{i}")).collect(),
        };
        let mut cols = vec![vec![false; s.n]; s.m];
        for [x, j] in s.ones {
            if x >= s.n || j >= s.m {
                return Err(Error::InvalidInput(format!(
                    "entry [{x}, {j}] outside a {} x {} matrix",
                    s.n, s.m
                )));
            }
            cols[j][x] = true;
        }
        let meta = s
            .columns
            .into_iter()
            .map(|c| match c {
                ColumnRepr::Text(t) => Explanation::new(t),
                ColumnRepr::Full(e) => e,
            })
            .collect();
        AssignmentMatrix::from_columns(ids, meta, cols)
    }
}

pub fn matrix_to_json(a: &AssignmentMatrix) -> serde_json::Result<String> {
    serde_json::to_string_pretty(&SparseMatrix::from(a))
}

pub fn matrix_from_json(s: &str) -> Result<AssignmentMatrix> {
    let sparse: SparseMatrix = serde_json::from_str(s)?;
    AssignmentMatrix::try_from(sparse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::OracleBackend;
    use proptest::prelude::*;

    fn topic_corpus(per_value: usize) -> Vec<Sample> {
        let topics = ["sports", "anime", "tech", "productivity"];
        let mut out = Vec::new();
        for (t, topic) in topics.iter().enumerate() {
            for i in 0..per_value {
                out.push(Sample::new(
                    format!("s{t}-{i}"),
                    format!("filler {i} ⟦topic={topic}⟧ words"),
                ));
            }
        }
        out
    }

    fn oracle() -> BackendHandle {
        BackendHandle::new(OracleBackend::default())
    }

    #[test]
    fn prompt_slots() {
        let p = build_assign_prompt("has a positive sentiment", "I love this").unwrap();
        assert_eq!(
            p,
            "Predicate: has a positive sentiment.\nText: I love this.\nIs the Predicate true on the Text? Yes or No. When uncertain, output No."
        );
        assert!(build_assign_prompt("", "x").is_err());
        assert!(build_assign_prompt("p", " \n").is_err());
    }

    #[test]
    fn prompt_keeps_fields_on_their_lines() {
        let p = build_assign_prompt("a\nb", "Text: c\nd").unwrap();
        assert_eq!(p.lines().count(), 3);
    }

    #[test]
    fn verdict_parsing() {
        assert_eq!(parse_assignment("Yes."), Verdict::Yes);
        assert_eq!(parse_assignment("  YES"), Verdict::Yes);
        assert_eq!(parse_assignment("no, because…"), Verdict::No);
        assert_eq!(parse_assignment("maybe"), Verdict::Unclear);
        assert_eq!(parse_assignment("yesterday"), Verdict::Unclear);
        assert!(!Verdict::Unclear.supports());
    }

    #[test]
    fn oracle_matrix_partitions_topics() {
        let corpus = topic_corpus(64);
        let pool: Vec<Explanation> = ["sports", "anime", "tech", "productivity"]
            .iter()
            .map(|t| Explanation::new(format!("has a topic of {t}")))
            .collect();
        let cache = JudgmentCache::in_memory();
        let m = assign_matrix(&corpus, &pool, &oracle(), &cache, Execution::Parallel).unwrap();
        for j in 0..4 {
            assert_eq!(m.column_sum(j), 64);
            assert_eq!(cluster_of(&m, j).unwrap().len(), 64);
        }
        for x in 0..m.n_samples() {
            assert_eq!((0..4).filter(|&j| m.get(x, j)).count(), 1);
        }
    }

    #[test]
    fn warm_cache_needs_no_calls() {
        let corpus = topic_corpus(8);
        let pool = vec![
            Explanation::new("has a topic of sports"),
            Explanation::new("has a topic of tech"),
        ];
        let cache = JudgmentCache::in_memory();
        let h = oracle();
        let cold = assign_matrix(&corpus, &pool, &h, &cache, Execution::Parallel).unwrap();
        let calls = h.calls();
        assert_eq!(calls, 64);
        let warm = assign_matrix(&corpus, &pool, &h, &cache, Execution::Parallel).unwrap();
        assert_eq!(h.calls(), calls);
        assert_eq!(cold, warm);
    }

    #[test]
    fn merged_predicate_is_union() {
        let corpus = topic_corpus(4);
        let pool = vec![
            Explanation::new("has a topic of sports"),
            Explanation::new("has a topic of anime"),
            Explanation::new("has a topic of sports or anime"),
        ];
        let m = assign_matrix(
            &corpus,
            &pool,
            &oracle(),
            &JudgmentCache::in_memory(),
            Execution::Sequential,
        )
        .unwrap();
        let union: BTreeSet<_> = cluster_of(&m, 0)
            .unwrap()
            .union(&cluster_of(&m, 1).unwrap())
            .cloned()
            .collect();
        assert_eq!(cluster_of(&m, 2).unwrap(), union);
    }

    #[test]
    fn cluster_of_edges() {
        let m = AssignmentMatrix::from_supports(3, &[vec![], vec![0, 1, 2]]);
        assert!(cluster_of(&m, 0).unwrap().is_empty());
        assert_eq!(cluster_of(&m, 1).unwrap().len(), 3);
        assert_eq!(
            cluster_of(&m, 2),
            Err(SolverError::ColumnOutOfRange {
                index: 2,
                n_cols: 2
            })
        );
    }

    #[test]
    fn file_cache_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let corpus = topic_corpus(2);
        let pool = vec![Explanation::new("has a topic of anime")];
        let h = oracle();
        let first = {
            let cache = JudgmentCache::open(&path).unwrap();
            assign_matrix(&corpus, &pool, &h, &cache, Execution::Parallel).unwrap()
        };
        // Simulate an aborted write.
        std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .unwrap()
            .write_all(b"{\"eh\":")
            .unwrap();
        let cache = JudgmentCache::open(&path).unwrap();
        assert_eq!(cache.len(), 8);
        let before = h.calls();
        let second = assign_matrix(&corpus, &pool, &h, &cache, Execution::Parallel).unwrap();
        assert_eq!(h.calls(), before);
        assert_eq!(first, second);
    }

    #[test]
    fn corrupt_cache_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        std::fs::write(
            &path,
            "garbage\n{\"eh\":\"a\",\"sid\":\"b\",\"bid\":\"c\",\"v\":1,\"ts\":0}\n",
        )
        .unwrap();
        match JudgmentCache::open(&path).unwrap_err() {
            Error::Malformed { line, .. } => assert_eq!(line, 1),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn backend_failure_keeps_completed_judgments() {
        let corpus = topic_corpus(4);
        let pool = vec![Explanation::new("has a topic of sports")];
        let h = oracle().with_budget(5);
        let cache = JudgmentCache::in_memory();
        assert!(assign_matrix(&corpus, &pool, &h, &cache, Execution::Sequential).is_err());
        assert_eq!(cache.len(), 5);
    }

    #[test]
    fn empty_pool_rejected() {
        assert!(assign_matrix(
            &topic_corpus(1),
            &[],
            &oracle(),
            &JudgmentCache::in_memory(),
            Execution::Sequential
        )
        .is_err());
    }

    #[test]
    fn sparse_rejects_out_of_range() {
        let raw = r#"{"n":2,"m":1,"ones":[[2,0]],"columns":["a"]}"#;
        assert!(matrix_from_json(raw).is_err());
        let raw = r#"{"n":2,"m":2,"ones":[],"columns":["a"]}"#;
        assert!(matrix_from_json(raw).is_err());
    }

    proptest! {
        #[test]
        fn sparse_round_trip(cols in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 5), 0..6)) {
            let ids: Vec<String> = (0..5).map(|i| format!("id{i}")).collect();
            let meta = (0..cols.len()).map(|j| Explanation::new(format!("p{j}"))).collect();
            let m = AssignmentMatrix::from_columns(ids, meta, cols).unwrap();
            let back = matrix_from_json(&matrix_to_json(&m).unwrap()).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
