//! Goal-driven, explainable text clustering.
//!
//! A proposer model reads batches of samples and suggests natural-language
//! explanations (predicates) for candidate clusters, an assigner decides for
//! every (explanation, sample) pair whether the explanation holds, and a
//! combinatorial selector picks K explanations that cover the corpus with
//! little overlap. The loop repeats on samples left uncovered.

pub mod assign;
pub mod backend;
pub mod error;
pub mod eval;
pub mod exec;
pub mod pipeline;
pub mod propose;
pub mod select;
pub mod synthio;
pub mod types;

pub use backend::{Backend, BackendHandle, BackendSpec};
pub use error::{Category, Error, Result};
pub use exec::Execution;
pub use pipeline::{
    build_taxonomy, commit, run_pas, Backends, PasRun, RunOptions, TaxonomyOptions,
};
pub use select::{solve_selection, SelectionInstance};
pub use types::*;
