//! Proposal stage: prompt construction under a context budget, response
//! parsing, and candidate-pool accumulation.

use std::collections::HashSet;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendHandle, CompletionRequest};
use crate::error::{BackendError, Error, Result};
use crate::exec::Execution;
use crate::types::{ClusteringTask, Explanation, Origin, Sample, TemplateKind};

pub const PROPOSER_TEMPERATURE: f64 = 0.7;
const PROPOSER_MAX_TOKENS: u32 = 1024;

/// Fraction of the context budget a proposal prompt may use, as a ratio.
const BUDGET_NUM: usize = 3;
const BUDGET_DEN: usize = 4;

/// How prompt length is measured against the context budget.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LengthUnit {
    Chars,
    /// `ceil(chars / 4)`, a tokenizer-free token estimate.
    #[default]
    ApproxTokens,
}

impl LengthUnit {
    pub fn measure(self, text: &str) -> usize {
        self.of_chars(text.chars().count())
    }

    fn of_chars(self, chars: usize) -> usize {
        match self {
            LengthUnit::Chars => chars,
            LengthUnit::ApproxTokens => chars.div_ceil(4),
        }
    }
}

/// Largest prompt length allowed for a given context budget.
pub fn prompt_limit(budget: usize) -> usize {
    budget * BUDGET_NUM / BUDGET_DEN
}

const SIMPLE_TEMPLATE: &str = "\
{samples}
Goal: {goal}
Generate a list of {j_prime} explanations for candidate clusters based on the samples. \
Each explanation is a predicate that is true or false on a single sample, such as \"has a topic of sports\". \
Answer in the format:
Explanation 1. <explanation>
Explanation 2. <explanation>
...";

const DETAILED_TEMPLATE: &str = "\
{samples}
Goal: {goal}
Generate a list of {j_prime} explanations for candidate clusters based on the samples. \
Each explanation is a detailed predicate that is true or false on a single sample: name the category, \
then write \"; specifically, \" followed by a precise description of what qualifies, \
then write \"For example, \" followed by a short quote from one of the samples. \
Answer in the format:
Explanation 1. <explanation>
Explanation 2. <explanation>
...";

/// Proposal prompt template with `{samples}`, `{goal}` and `{j_prime}`
/// placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl PromptTemplate {
    pub fn builtin(kind: TemplateKind) -> Self {
        Self {
            text: match kind {
                TemplateKind::Simple => SIMPLE_TEMPLATE,
                TemplateKind::Detailed => DETAILED_TEMPLATE,
            }
            .to_string(),
        }
    }

    pub fn parse(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.matches("{samples}").count() != 1 {
            return Err(Error::InvalidInput(
                "template must contain {samples} exactly once".into(),
            ));
        }
        for p in ["{goal}", "{j_prime}"] {
            if !text.contains(p) {
                return Err(Error::InvalidInput(format!("template lacks {p}")));
            }
        }
        Ok(Self { text })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let raw =
            std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::parse(raw)
    }

    fn render(&self, samples: &str, goal: &str, j_prime: usize) -> String {
        self.text
            .replace("{goal}", goal)
            .replace("{j_prime}", &j_prime.to_string())
            .replace("{samples}", samples)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalPrompt {
    /// The samples shown, in order.
    pub sample_ids: Vec<String>,
    pub goal: String,
    pub requested_count: usize,
    pub rendered: String,
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Renders the longest prefix of `samples` that keeps the prompt within 75%
/// of `budget`.
pub fn build_proposal_prompt(
    samples: &[&Sample],
    goal: &str,
    j_prime: usize,
    budget: usize,
    template: &PromptTemplate,
    unit: LengthUnit,
) -> Result<ProposalPrompt> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples to propose from".into()));
    }
    let goal = one_line(goal);
    let limit = prompt_limit(budget);
    let scaffold = template.render("", &goal, j_prime).chars().count();
    let mut block = String::new();
    let mut block_chars = 0usize;
    let mut ids = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let line = format!(
            "{}Sample {}. {}",
            if i == 0 { "" } else { "\n" },
            i + 1,
            one_line(&s.text)
        );
        let n = line.chars().count();
        if unit.of_chars(scaffold + block_chars + n) > limit {
            break;
        }
        block.push_str(&line);
        block_chars += n;
        ids.push(s.id.clone());
    }
    if ids.is_empty() {
        return Err(Error::InvalidInput(format!(
            "context budget {budget} too small to fit even one sample"
        )));
    }
    let rendered = template.render(&block, &goal, j_prime);
    debug_assert!(unit.measure(&rendered) <= limit);
    Ok(ProposalPrompt {
        sample_ids: ids,
        goal,
        requested_count: j_prime,
        rendered,
    })
}

fn numbered_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^\s*(?:[-*•+]\s*)?(?:\*\*)?(?:explanation\s*)?\(?\d+\s*[.):\]]\s*(?:\*\*)?\s*(.*)$").unwrap()
    })
}

fn bullet_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*[-*•]\s+(.+)$").unwrap())
}

fn clean(item: &str) -> String {
    let t = item.trim().trim_matches('*').trim();
    let t = t.strip_suffix(';').unwrap_or(t).trim();
    let t = t
        .strip_prefix('"')
        .and_then(|x| x.strip_suffix('"'))
        .unwrap_or(t);
    t.trim().to_string()
}

/// Extracts the numbered (or bulleted) explanations of a proposer response,
/// in order. Positions are set; the caller stamps iteration and prompt.
pub fn parse_explanations(response: &str) -> Result<Vec<Explanation>> {
    let items: Vec<String> = response
        .lines()
        .filter_map(|l| {
            numbered_re()
                .captures(l)
                .or_else(|| bullet_re().captures(l))
                .map(|c| clean(&c[1]))
        })
        .filter(|t| !t.is_empty())
        .collect();
    if items.is_empty() {
        return Err(Error::Backend(BackendError::MalformedResponse(format!(
            "no explanations in proposer response: {}",
            response.chars().take(80).collect::<String>()
        ))));
    }
    Ok(items
        .into_iter()
        .enumerate()
        .map(|(position, text)| {
            Explanation::with_origin(
                text,
                Origin {
                    position,
                    ..Origin::default()
                },
            )
        })
        .collect())
}

#[derive(Debug, Clone, Default)]
pub struct ProposalOutcome {
    /// Newly proposed explanations, deduplicated against the existing pool.
    pub new: Vec<Explanation>,
    pub prompts: usize,
    pub quota_reached: bool,
}

fn dedup_key(text: &str) -> String {
    text.trim().to_lowercase()
}

/// Seed for one iteration's sample shuffles.
pub(crate) fn iteration_seed(seed: u64, iteration: usize) -> u64 {
    seed ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Proposes candidates from `focus` until `ceil(J / iterations)` new,
/// deduplicated explanations are collected or `task.max_prompts` prompts
/// have been issued. Prompts go out in waves; responses are merged in prompt
/// order, so the result does not depend on completion order.
pub fn propose_candidates(
    task: &ClusteringTask,
    focus: &[&Sample],
    backend: &BackendHandle,
    iteration: usize,
    existing: &[Explanation],
    exec: Execution,
) -> Result<ProposalOutcome> {
    let template = PromptTemplate::builtin(task.template);
    propose_with_template(
        task,
        focus,
        backend,
        iteration,
        existing,
        exec,
        &template,
        LengthUnit::default(),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn propose_with_template(
    task: &ClusteringTask,
    focus: &[&Sample],
    backend: &BackendHandle,
    iteration: usize,
    existing: &[Explanation],
    exec: Execution,
    template: &PromptTemplate,
    unit: LengthUnit,
) -> Result<ProposalOutcome> {
    if focus.is_empty() {
        return Err(Error::InvalidInput("proposal focus is empty".into()));
    }
    let quota = task.per_iteration_quota();
    let mut rng = ChaCha8Rng::seed_from_u64(iteration_seed(task.seed, iteration));
    let mut order: Vec<&Sample> = focus.to_vec();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut seen: HashSet<String> = existing.iter().map(|e| dedup_key(&e.text)).collect();
    let mut out = ProposalOutcome::default();

    while out.prompts < task.max_prompts && out.new.len() < quota {
        let wave = (quota - out.new.len())
            .div_ceil(task.j_per_prompt)
            .min(task.max_prompts - out.prompts);
        let mut prompts = Vec::with_capacity(wave);
        for _ in 0..wave {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let p = build_proposal_prompt(
                &order[cursor..],
                &task.goal,
                task.j_per_prompt,
                task.context_budget,
                template,
                unit,
            )?;
            cursor += p.sample_ids.len();
            prompts.push(p);
        }
        let responses = exec.try_map(&prompts, |p| {
            backend.complete(&CompletionRequest::new(
                p.rendered.clone(),
                PROPOSER_MAX_TOKENS,
                PROPOSER_TEMPERATURE,
            ))
        })?;
        for response in responses {
            let prompt_index = out.prompts;
            out.prompts += 1;
            let parsed = match parse_explanations(&response) {
                Ok(p) => p,
                Err(e) => {
                    log::warn!("iteration {iteration}, prompt {prompt_index}: {e}");
                    continue;
                }
            };
            for mut e in parsed {
                if seen.insert(dedup_key(&e.text)) {
                    e.origin.iteration = iteration;
                    e.origin.prompt = prompt_index;
                    out.new.push(e);
                }
            }
        }
    }
    out.quota_reached = out.new.len() >= quota;
    if !out.quota_reached {
        log::warn!(
            "iteration {iteration}: collected {} of {quota} candidates after {} prompts",
            out.new.len(),
            out.prompts
        );
    }
    Ok(out)
}

/// Folds a parent explanation into the goal, asking for finer-grained
/// clusters within the parent's category.
pub fn augment_goal(goal: &str, parent: &str) -> Result<String> {
    augment_goal_with_unit(goal, parent, "samples")
}

pub fn augment_goal_with_unit(goal: &str, parent: &str, unit: &str) -> Result<String> {
    let parent = one_line(parent);
    if parent.is_empty() {
        return Err(Error::InvalidInput("parent explanation is empty".into()));
    }
    let g = one_line(goal);
    let g = g.trim_end_matches('.');
    let lead = if g.to_lowercase().starts_with("my goal is") {
        g.to_string()
    } else if g.to_lowercase().starts_with("to ") {
        format!("My goal is {g}")
    } else {
        format!("My goal is to {g}")
    };
    Ok(format!(
        "{lead}. Now we have gathered the {unit} that fall under the following category: {parent}, \
         and I want to create finer-grained cluster descriptions that fall under the above category."
    ))
}
