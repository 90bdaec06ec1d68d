//! Language-model backends for the proposer, assigner and committer roles.
//!
//! Three implementations: an HTTP chat-completion client, a deterministic
//! oracle that decides predicates by marker-token containment, and a
//! scripted backend that replays queued responses. [`BackendHandle`] wraps
//! any of them with a call budget, a concurrency limit and an audit log.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::BackendError;

/// Environment variable holding the API key for HTTP chat backends.
pub const API_KEY_ENV: &str = "PAS_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, max_tokens: u32, temperature: f64) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens,
            temperature,
            stop: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    HttpChat,
    OracleKeyword,
    FixedScript,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::HttpChat => "http-chat",
            BackendKind::OracleKeyword => "oracle-keyword",
            BackendKind::FixedScript => "fixed-script",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackendId {
    pub kind: BackendKind,
    pub model_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
}

impl fmt::Display for BackendId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.model_name)?;
        if let Some(e) = &self.endpoint {
            write!(f, "@{e}")?;
        }
        Ok(())
    }
}

pub trait Backend: Send + Sync {
    fn id(&self) -> BackendId;
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError>;
}

// ---------------------------------------------------------------------------
// Oracle

/// Which distractor predicates the oracle proposer adds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Distractors {
    /// "has a d of v1 or v2" for the first two observed values.
    pub merged: bool,
    /// "has a d of v1 and a d2 of w", covering part of v1.
    pub partial: bool,
}

/// Deterministic stand-in for a language model.
///
/// Synthetic samples carry marker tokens `⟦dimension=value⟧`. Predicates of
/// the form `has a <dimension> of <value>` (with `or` between values and
/// `and` between clauses) are true on a text iff it carries matching markers.
#[derive(Debug, Clone, Default)]
pub struct OracleBackend {
    pub distractors: Distractors,
}

impl OracleBackend {
    pub fn new(distractors: Distractors) -> Self {
        Self { distractors }
    }
}

impl Backend for OracleBackend {
    fn id(&self) -> BackendId {
        let mut name = String::from("oracle");
        if self.distractors.merged {
            name.push_str("+merged");
        }
        if self.distractors.partial {
            name.push_str("+partial");
        }
        BackendId {
            kind: BackendKind::OracleKeyword,
            model_name: name,
            endpoint: None,
        }
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let prompt = request.prompt.as_str();
        if prompt.trim().is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        if prompt.contains("Choose the Predicate") {
            Ok(oracle_commit(prompt))
        } else if prompt.contains("Is the Predicate true") {
            Ok(oracle_assign(prompt))
        } else if prompt.contains("Goal:") {
            oracle_propose_with(prompt, self.distractors)
        } else {
            Err(BackendError::UnrecognizedPrompt(
                prompt.chars().take(60).collect(),
            ))
        }
    }
}

fn marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"⟦([^=⟧]+)=([^⟧]+)⟧").unwrap())
}

/// Marker tokens in order of appearance, lowercased.
pub fn markers(text: &str) -> Vec<(String, String)> {
    marker_re()
        .captures_iter(text)
        .map(|c| (c[1].trim().to_lowercase(), c[2].trim().to_lowercase()))
        .collect()
}

/// Renders the marker token for a dimension value.
pub fn marker(dim: &str, value: &str) -> String {
    format!("⟦{dim}={value}⟧")
}

/// Canonical oracle predicate for one dimension value.
pub fn predicate(dim: &str, value: &str) -> String {
    format!("has a {dim} of {value}")
}

/// Evaluates an oracle-grammar predicate against a text.
pub fn oracle_holds(predicate: &str, text: &str) -> bool {
    let found = markers(text);
    let p = predicate.trim().trim_end_matches('.').to_lowercase();
    let p = p.strip_prefix("has ").unwrap_or(&p);
    let clause_re = {
        static RE: OnceLock<Regex> = OnceLock::new();
        RE.get_or_init(|| Regex::new(r"^(?:has )?an? (\S+) of (.+)$").unwrap())
    };
    let mut any = false;
    for clause in p.split(" and ") {
        let Some(c) = clause_re.captures(clause.trim()) else {
            return false;
        };
        let dim = &c[1];
        let ok = c[2]
            .split(" or ")
            .map(str::trim)
            .any(|v| found.iter().any(|(d, fv)| d == dim && fv == v));
        if !ok {
            return false;
        }
        any = true;
    }
    any
}

fn line_after<'a>(prompt: &'a str, prefix: &str) -> Option<&'a str> {
    prompt
        .lines()
        .find_map(|l| l.trim_start().strip_prefix(prefix))
        .map(|s| s.trim())
}

fn strip_period(s: &str) -> &str {
    s.strip_suffix('.').unwrap_or(s)
}

fn oracle_assign(prompt: &str) -> String {
    let pred = line_after(prompt, "Predicate:")
        .map(strip_period)
        .unwrap_or("");
    let text = line_after(prompt, "Text:").unwrap_or("");
    if oracle_holds(pred, text) {
        "Yes"
    } else {
        "No"
    }
    .to_string()
}

fn oracle_commit(prompt: &str) -> String {
    let re = {
        static RE: OnceLock<Regex> = OnceLock::new();
        RE.get_or_init(|| Regex::new(r"^\s*Predicate (\d+):\s*(.*)$").unwrap())
    };
    let text = line_after(prompt, "Text:").unwrap_or("");
    let choice = prompt
        .lines()
        .filter_map(|l| re.captures(l))
        .find(|c| oracle_holds(&c[2], text))
        .map(|c| c[1].to_string())
        .unwrap_or_else(|| "0".to_string());
    format!("Predicate {choice}")
}

/// Oracle proposer with no distractors.
pub fn oracle_propose(prompt: &str) -> Result<String, BackendError> {
    oracle_propose_with(prompt, Distractors::default())
}

/// Oracle proposer: one explanation per distinct value of the goal's
/// dimension among the prompt's samples, in first-appearance order, then the
/// configured distractors.
///
/// The goal dimension is the earliest marker dimension named in the goal.
/// When every shown sample shares one value of it (a parent category already
/// fixed it), the oracle descends to `sub<dimension>`, `subsub<dimension>`
/// and so on.
pub fn oracle_propose_with(prompt: &str, distractors: Distractors) -> Result<String, BackendError> {
    let goal = line_after(prompt, "Goal:")
        .ok_or_else(|| BackendError::UnrecognizedPrompt("no Goal: line".into()))?
        .to_lowercase();
    let samples: Vec<Vec<(String, String)>> = prompt
        .lines()
        .filter(|l| l.trim_start().starts_with("Sample "))
        .map(markers)
        .collect();

    let mut dims: Vec<String> = Vec::new();
    for (d, _) in samples.iter().flatten() {
        if !dims.contains(d) {
            dims.push(d.clone());
        }
    }
    let base = dims
        .iter()
        .filter_map(|d| {
            let re = Regex::new(&format!(r"\b{}\b", regex::escape(d))).ok()?;
            re.find(&goal).map(|m| (m.start(), d))
        })
        .min()
        .map(|(_, d)| d.clone())
        .ok_or_else(|| {
            BackendError::UnrecognizedPrompt(format!("goal names no known dimension: {goal}"))
        })?;

    let values_of = |dim: &str| -> Vec<String> {
        let mut vals: Vec<String> = Vec::new();
        for (d, v) in samples.iter().flatten() {
            if d == dim && !vals.contains(v) {
                vals.push(v.clone());
            }
        }
        vals
    };
    let mut dim = base.clone();
    let mut candidate = base.clone();
    loop {
        if values_of(&candidate).len() >= 2 {
            dim = candidate;
            break;
        }
        candidate = format!("sub{candidate}");
        if !dims.contains(&candidate) {
            break;
        }
    }
    let values = values_of(&dim);

    let mut lines: Vec<String> = values.iter().map(|v| predicate(&dim, v)).collect();
    if distractors.merged && values.len() >= 2 {
        lines.push(format!("has a {dim} of {} or {}", values[0], values[1]));
    }
    if distractors.partial {
        if let Some(first) = values.first() {
            let other = samples.iter().find_map(|s| {
                if !s.iter().any(|(d, v)| *d == dim && v == first) {
                    return None;
                }
                s.iter().find(|(d, _)| *d != dim).cloned()
            });
            if let Some((od, ov)) = other {
                lines.push(format!("has a {dim} of {first} and a {od} of {ov}"));
            }
        }
    }
    Ok(lines
        .iter()
        .enumerate()
        .map(|(i, l)| format!("Explanation {}. {l}", i + 1))
        .collect::<Vec<_>>()
        .join("\n"))
}

// ---------------------------------------------------------------------------
// Scripted

/// Replays queued responses in order; errors once the queue is empty.
#[derive(Debug, Default)]
pub struct FixedScriptBackend {
    name: String,
    queue: Mutex<(VecDeque<String>, usize)>,
}

impl FixedScriptBackend {
    pub fn new(name: impl Into<String>, responses: impl IntoIterator<Item = String>) -> Self {
        Self {
            name: name.into(),
            queue: Mutex::new((responses.into_iter().collect(), 0)),
        }
    }

    /// Number of responses served so far.
    pub fn cursor(&self) -> usize {
        self.queue.lock().unwrap().1
    }
}

impl Backend for FixedScriptBackend {
    fn id(&self) -> BackendId {
        BackendId {
            kind: BackendKind::FixedScript,
            model_name: self.name.clone(),
            endpoint: None,
        }
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        if request.prompt.trim().is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        let mut q = self.queue.lock().unwrap();
        match q.0.pop_front() {
            Some(r) => {
                q.1 += 1;
                Ok(r)
            }
            None => Err(BackendError::ScriptExhausted(q.1)),
        }
    }
}

// ---------------------------------------------------------------------------
// HTTP chat completion

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    stop: Option<&'a [String]>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: Option<String>,
}

/// OpenAI-style `/chat/completions` client.
pub struct HttpChatBackend {
    model: String,
    endpoint: String,
    api_key: String,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl fmt::Debug for HttpChatBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpChatBackend")
            .field("model", &self.model)
            .field("endpoint", &self.endpoint)
            .field("retry", &self.retry)
            .finish_non_exhaustive()
    }
}

impl HttpChatBackend {
    /// Reads the API key from [`API_KEY_ENV`].
    pub fn from_env(
        model: impl Into<String>,
        endpoint: impl Into<String>,
    ) -> Result<Self, BackendError> {
        let key = std::env::var(API_KEY_ENV)
            .map_err(|_| BackendError::MissingCredentials(API_KEY_ENV.to_string()))?;
        Self::new(model, endpoint, key)
    }

    pub fn new(
        model: impl Into<String>,
        endpoint: impl Into<String>,
        api_key: impl Into<String>,
    ) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| BackendError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self {
            model: model.into(),
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            retry: RetryPolicy::default(),
            client,
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn attempt(&self, request: &CompletionRequest) -> Result<String, Attempt> {
        let body = ChatRequest {
            model: &self.model,
            messages: vec![ChatMessage {
                role: "user",
                content: &request.prompt,
            }],
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            stop: request.stop.as_deref(),
        };
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
            return Err(Attempt::Fatal(BackendError::Auth(status.to_string())));
        }
        if status == reqwest::StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(BackendError::Transport {
                attempts: 1,
                message: format!("HTTP {status}"),
            }));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| Attempt::Fatal(BackendError::MalformedResponse(e.to_string())))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Attempt::Fatal(BackendError::MalformedResponse("no choices".into())))
    }
}

enum Attempt {
    Retry(String),
    Fatal(BackendError),
}

impl Backend for HttpChatBackend {
    fn id(&self) -> BackendId {
        BackendId {
            kind: BackendKind::HttpChat,
            model_name: self.model.clone(),
            endpoint: Some(self.endpoint.clone()),
        }
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        if request.prompt.trim().is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        let mut delay = self.retry.initial_backoff;
        let attempts = self.retry.attempts.max(1);
        let mut last = String::new();
        for i in 0..attempts {
            match self.attempt(request) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    log::warn!("{}: attempt {} failed: {msg}", self.model, i + 1);
                    last = msg;
                    if i + 1 < attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(BackendError::Transport {
            attempts,
            message: last,
        })
    }
}

// ---------------------------------------------------------------------------
// Limits, audit and construction from specs

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.cv.wait(p).unwrap();
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Serialize)]
struct AuditRecord<'a> {
    ts: String,
    bid: String,
    prompt: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    response: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Shared, cloneable handle to a backend with optional call budget,
/// concurrency limit and JSONL audit log.
#[derive(Clone)]
pub struct BackendHandle {
    inner: Arc<dyn Backend>,
    shared: Arc<Shared>,
}

struct Shared {
    max_calls: Option<usize>,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
    limiter: Option<Semaphore>,
    audit: Option<Mutex<File>>,
}

impl fmt::Debug for BackendHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendHandle")
            .field("id", &self.inner.id().to_string())
            .field("calls", &self.calls())
            .finish()
    }
}

impl BackendHandle {
    pub fn new(backend: impl Backend + 'static) -> Self {
        Self::from_arc(Arc::new(backend))
    }

    pub fn from_arc(inner: Arc<dyn Backend>) -> Self {
        Self {
            inner,
            shared: Arc::new(Shared {
                max_calls: None,
                calls: AtomicUsize::new(0),
                in_flight: AtomicUsize::new(0),
                peak_in_flight: AtomicUsize::new(0),
                limiter: None,
                audit: None,
            }),
        }
    }

    fn shared_mut(&mut self) -> &mut Shared {
        Arc::get_mut(&mut self.shared).expect("configure a handle before cloning it")
    }

    /// Caps the total number of calls through this handle.
    pub fn with_budget(mut self, max_calls: usize) -> Self {
        self.shared_mut().max_calls = Some(max_calls);
        self
    }

    /// Caps the number of concurrent calls through this handle.
    pub fn with_concurrency(mut self, limit: usize) -> Self {
        self.shared_mut().limiter = Some(Semaphore::new(limit.max(1)));
        self
    }

    /// Appends one JSONL record per call to `path`.
    pub fn with_audit(mut self, path: impl AsRef<Path>) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.shared_mut().audit = Some(Mutex::new(file));
        Ok(self)
    }

    pub fn id(&self) -> BackendId {
        self.inner.id()
    }

    pub fn calls(&self) -> usize {
        self.shared.calls.load(Ordering::SeqCst)
    }

    /// Highest number of simultaneous in-flight calls observed.
    pub fn peak_concurrency(&self) -> usize {
        self.shared.peak_in_flight.load(Ordering::SeqCst)
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        if request.prompt.trim().is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        let s = &self.shared;
        let n = s.calls.fetch_add(1, Ordering::SeqCst) + 1;
        if let Some(max) = s.max_calls {
            if n > max {
                s.calls.fetch_sub(1, Ordering::SeqCst);
                return Err(BackendError::BudgetExceeded(max));
            }
        }
        let _permit = s.limiter.as_ref().map(Semaphore::acquire);
        let now = s.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        s.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        let result = self.inner.complete(request);
        s.in_flight.fetch_sub(1, Ordering::SeqCst);
        if let Some(audit) = &s.audit {
            let rec = AuditRecord {
                ts: chrono::Utc::now().to_rfc3339(),
                bid: self.inner.id().to_string(),
                prompt: &request.prompt,
                response: result.as_ref().ok().map(String::as_str),
                error: result.as_ref().err().map(ToString::to_string),
            };
            let mut line = serde_json::to_string(&rec).expect("audit record serializes");
            line.push('\n');
            let mut f = audit.lock().unwrap();
            if let Err(e) = f.write_all(line.as_bytes()) {
                log::warn!("audit log write failed: {e}");
            }
        }
        result
    }
}

/// Parsed backend description, as given on the command line.
///
/// * `oracle`, `oracle:merged`, `oracle:partial`, `oracle:merged+partial`
/// * `script:<path>` with a JSON array of response strings
/// * `http:<model>@<url>`, API key from [`API_KEY_ENV`]
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Oracle(Distractors),
    Script(String),
    Http { model: String, endpoint: String },
}

impl std::str::FromStr for BackendSpec {
    type Err = BackendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BackendError::InvalidSpec(s.to_string());
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "oracle" => {
                let mut d = Distractors::default();
                for opt in rest.split('+').filter(|o| !o.is_empty()) {
                    match opt {
                        "merged" => d.merged = true,
                        "partial" => d.partial = true,
                        _ => return Err(bad()),
                    }
                }
                Ok(BackendSpec::Oracle(d))
            }
            "script" if !rest.is_empty() => Ok(BackendSpec::Script(rest.to_string())),
            "http" => {
                let (model, endpoint) = rest.split_once('@').ok_or_else(bad)?;
                if model.is_empty() || endpoint.is_empty() {
                    return Err(bad());
                }
                Ok(BackendSpec::Http {
                    model: model.to_string(),
                    endpoint: endpoint.to_string(),
                })
            }
            _ => Err(bad()),
        }
    }
}

impl BackendSpec {
    pub fn build(&self) -> Result<BackendHandle, BackendError> {
        Ok(match self {
            BackendSpec::Oracle(d) => BackendHandle::new(OracleBackend::new(*d)),
            BackendSpec::Script(path) => {
                let raw = std::fs::read_to_string(path)
                    .map_err(|e| BackendError::InvalidSpec(format!("{path}: {e}")))?;
                let responses: Vec<String> = serde_json::from_str(&raw)
                    .map_err(|e| BackendError::InvalidSpec(format!("{path}: {e}")))?;
                BackendHandle::new(FixedScriptBackend::new(path.clone(), responses))
            }
            BackendSpec::Http { model, endpoint } => {
                BackendHandle::new(HttpChatBackend::from_env(model.clone(), endpoint.clone())?)
            }
        })
    }
}

/// Call counts per backend id, for run manifests.
pub fn call_summary(handles: &[&BackendHandle]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for h in handles {
        *out.entry(h.id().to_string()).or_insert(0) += h.calls();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(p: &str) -> CompletionRequest {
        CompletionRequest::new(p, 16, 0.0)
    }

    fn assign_prompt(pred: &str, text: &str) -> String {
        format!("Predicate: {pred}.\nText: {text}.\nIs the Predicate true on the Text? Yes or No. When uncertain, output No.")
    }

    #[test]
    fn oracle_assigner_decides_by_marker() {
        let o = OracleBackend::default();
        let yes = o
            .complete(&req(&assign_prompt(
                "has a topic of sports",
                "a match ⟦topic=sports⟧ today",
            )))
            .unwrap();
        assert_eq!(yes, "Yes");
        let no = o
            .complete(&req(&assign_prompt(
                "has a topic of sports",
                "a show ⟦topic=anime⟧",
            )))
            .unwrap();
        assert_eq!(no, "No");
    }

    #[test]
    fn oracle_grammar() {
        let t = "x ⟦topic=sports⟧ y ⟦style=rap⟧";
        assert!(oracle_holds("has a topic of sports or anime", t));
        assert!(oracle_holds("has a topic of sports and a style of rap", t));
        assert!(!oracle_holds(
            "has a topic of sports and a style of poem",
            t
        ));
        assert!(!oracle_holds("is about sports", t));
        assert!(!oracle_holds("", t));
        assert!(oracle_holds("Has a Topic of Sports.", t));
    }

    fn propose_prompt(goal: &str, texts: &[&str]) -> String {
        let mut p = String::new();
        for (i, t) in texts.iter().enumerate() {
            p.push_str(&format!("Sample {}. {t}\n", i + 1));
        }
        p.push_str(&format!("Goal: {goal}\nGenerate a list of 8 explanations for candidate clusters based on the samples."));
        p
    }

    #[test]
    fn oracle_proposer_lists_observed_values() {
        let p = propose_prompt(
            "cluster by topic",
            &["a ⟦topic=sports⟧", "b ⟦topic=anime⟧", "c ⟦topic=sports⟧"],
        );
        assert_eq!(
            oracle_propose(&p).unwrap(),
            "Explanation 1. has a topic of sports\nExplanation 2. has a topic of anime"
        );
        let merged = oracle_propose_with(
            &p,
            Distractors {
                merged: true,
                partial: false,
            },
        )
        .unwrap();
        assert!(
            merged.ends_with("Explanation 3. has a topic of sports or anime"),
            "{merged}"
        );
    }

    #[test]
    fn oracle_proposer_first_appearance_order() {
        let p = propose_prompt(
            "cluster by language",
            &[
                "⟦language=english⟧ ⟦topic=a⟧",
                "⟦language=french⟧ ⟦topic=b⟧",
                "⟦language=english⟧ ⟦topic=b⟧",
            ],
        );
        let r = oracle_propose(&p).unwrap();
        assert_eq!(
            r,
            "Explanation 1. has a language of english\nExplanation 2. has a language of french"
        );
    }

    #[test]
    fn oracle_proposer_partial_distractor() {
        let p = propose_prompt(
            "cluster by topic",
            &["⟦topic=a⟧ ⟦style=rap⟧", "⟦topic=b⟧ ⟦style=poem⟧"],
        );
        let r = oracle_propose_with(
            &p,
            Distractors {
                merged: false,
                partial: true,
            },
        )
        .unwrap();
        assert!(r.contains("has a topic of a and a style of rap"), "{r}");
    }

    #[test]
    fn oracle_proposer_descends_into_subdimension() {
        let p = propose_prompt(
            "My goal is to cluster by topic. Now we have gathered the samples that fall under the following category: has a topic of sports",
            &["⟦topic=sports⟧ ⟦subtopic=soccer⟧", "⟦topic=sports⟧ ⟦subtopic=tennis⟧"],
        );
        let r = oracle_propose(&p).unwrap();
        assert_eq!(
            r,
            "Explanation 1. has a subtopic of soccer\nExplanation 2. has a subtopic of tennis"
        );
    }

    #[test]
    fn oracle_proposer_unknown_goal() {
        let p = propose_prompt("cluster by mood", &["⟦topic=a⟧"]);
        assert!(matches!(
            oracle_propose(&p),
            Err(BackendError::UnrecognizedPrompt(_))
        ));
    }

    #[test]
    fn oracle_committer() {
        let o = OracleBackend::default();
        let p = "Predicate 0: has a topic of anime\nPredicate 1: has a topic of sports\nText: ⟦topic=sports⟧.\nChoose the Predicate the matches the Text the most.";
        assert_eq!(o.complete(&req(p)).unwrap(), "Predicate 1");
        let p = "Predicate 0: has a topic of anime\nText: nothing.\nChoose the Predicate the matches the Text the most.";
        assert_eq!(o.complete(&req(p)).unwrap(), "Predicate 0");
    }

    #[test]
    fn script_backend_advances() {
        let b = FixedScriptBackend::new("s", ["Explanation 1. foo".to_string()]);
        assert_eq!(b.complete(&req("p")).unwrap(), "Explanation 1. foo");
        assert_eq!(b.cursor(), 1);
        assert!(matches!(
            b.complete(&req("p")),
            Err(BackendError::ScriptExhausted(1))
        ));
    }

    #[test]
    fn budget_enforced() {
        let h = BackendHandle::new(OracleBackend::default()).with_budget(2);
        let p = assign_prompt("has a topic of a", "⟦topic=a⟧");
        h.complete(&req(&p)).unwrap();
        h.complete(&req(&p)).unwrap();
        assert!(matches!(
            h.complete(&req(&p)),
            Err(BackendError::BudgetExceeded(2))
        ));
        assert_eq!(h.calls(), 2);
    }

    #[test]
    fn empty_prompt_rejected() {
        let h = BackendHandle::new(OracleBackend::default());
        assert!(matches!(
            h.complete(&req("  ")),
            Err(BackendError::EmptyPrompt)
        ));
    }

    #[test]
    fn specs_parse() {
        assert_eq!(
            "oracle".parse::<BackendSpec>().unwrap(),
            BackendSpec::Oracle(Distractors::default())
        );
        assert_eq!(
            "oracle:merged+partial".parse::<BackendSpec>().unwrap(),
            BackendSpec::Oracle(Distractors {
                merged: true,
                partial: true
            })
        );
        assert_eq!(
            "http:gpt@http://localhost/v1"
                .parse::<BackendSpec>()
                .unwrap(),
            BackendSpec::Http {
                model: "gpt".into(),
                endpoint: "http://localhost/v1".into()
            }
        );
        assert!("http:gpt".parse::<BackendSpec>().is_err());
        assert!("oracle:wat".parse::<BackendSpec>().is_err());
        assert!("gpt".parse::<BackendSpec>().is_err());
    }

    #[test]
    fn audit_log_records_calls() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.jsonl");
        let h = BackendHandle::new(OracleBackend::default())
            .with_audit(&path)
            .unwrap();
        h.complete(&req(&assign_prompt("has a topic of a", "⟦topic=a⟧")))
            .unwrap();
        let log = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(v["response"], "Yes");
        assert_eq!(v["bid"], "oracle-keyword:oracle");
    }
}
