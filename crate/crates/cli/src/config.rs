//! Optional TOML config file. Keys mirror the long flag names with dashes
//! replaced by underscores; flags given on the command line win.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub corpus: Option<PathBuf>,
    pub goal: Option<String>,
    pub k: Option<usize>,
    pub lambda: Option<f64>,
    pub j: Option<usize>,
    pub j_per_prompt: Option<usize>,
    pub iterations: Option<usize>,
    pub context_budget: Option<usize>,
    pub max_prompts: Option<usize>,
    pub template: Option<String>,
    pub proposer: Option<String>,
    pub assigner: Option<String>,
    pub committer: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub commit: Option<bool>,
    pub audit: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub solver: Option<String>,
    pub ref_attr: Option<String>,
    pub parallel: Option<usize>,
    pub max_calls: Option<usize>,
    pub concurrency: Option<usize>,
    pub max_depth: Option<usize>,
    pub split_threshold: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
