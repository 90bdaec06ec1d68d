mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use pas_core::assign::{matrix_from_json, JudgmentCache};
use pas_core::backend::{call_summary, BackendHandle, BackendSpec};
use pas_core::error::{BackendError, SolverError};
use pas_core::eval::{evaluate, EvalReport};
use pas_core::select::{solve_selection, SelectionInstance};
use pas_core::synthio::{
    default_dimensions, generate_synthetic, load_corpus, perturb_imbalance, perturb_noise,
    read_artifact, save_artifacts, save_corpus, Dimension, RunArtifacts,
};
use pas_core::{
    build_taxonomy, run_pas, Backends, Category, ClusterSet, ClusteringTask, Execution,
    ReferenceLabels, RunOptions, Sample, SolverKind, TaxonomyOptions, TemplateKind,
};

use crate::config::FileConfig;

/// Goal-driven explainable text clustering.
#[derive(Debug, Parser)]
#[command(name = "pas", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cluster a corpus into K explained clusters.
    Cluster(ClusterArgs),
    /// Build a cluster tree by re-clustering large clusters.
    Taxonomy(TaxonomyArgs),
    /// Score clusters against reference labels and write metrics.json.
    Eval(EvalArgs),
    /// Solve a standalone selection instance and print the solution.
    Solve(SolveArgs),
    /// Write a synthetic corpus with planted attributes.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML config file; keys mirror the long flags (dashes as underscores)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// JSONL corpus, one {"id", "text", "labels"?, "attrs"?} object per line
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    /// Clustering goal in natural language
    #[arg(long)]
    goal: Option<String>,
    /// Overlap penalty weight; 0.3 works better for many clusters [default: 0.5]
    #[arg(long)]
    lambda: Option<f64>,
    /// Target size of the candidate pool [default: 30]
    #[arg(long)]
    j: Option<usize>,
    /// Explanations requested per proposal prompt [default: 8]
    #[arg(long, value_name = "N")]
    j_per_prompt: Option<usize>,
    /// Propose/assign/select rounds [default: 5]
    #[arg(long)]
    iterations: Option<usize>,
    /// Proposer context window in approximate tokens [default: 4096]
    #[arg(long, value_name = "N")]
    context_budget: Option<usize>,
    /// Proposal prompts per round at most [default: 8]
    #[arg(long, value_name = "N")]
    max_prompts: Option<usize>,
    /// Proposal prompt template: simple or detailed [default: simple]
    #[arg(long)]
    template: Option<String>,
    /// Proposer backend: oracle[:merged+partial], script:<file>, http:<model>@<url> [default: oracle]
    #[arg(long, value_name = "SPEC")]
    proposer: Option<String>,
    /// Assigner backend, same syntax as --proposer [default: oracle]
    #[arg(long, value_name = "SPEC")]
    assigner: Option<String>,
    /// Committer backend, same syntax as --proposer [default: the assigner spec]
    #[arg(long, value_name = "SPEC")]
    committer: Option<String>,
    /// Random seed for sample shuffling [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts [default: pas-out]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// JSONL audit log of every backend call [default: none]
    #[arg(long, value_name = "FILE")]
    audit: Option<PathBuf>,
    /// Judgment cache file [default: <out>/judgments.jsonl]
    #[arg(long, value_name = "FILE")]
    cache: Option<PathBuf>,
    /// Selection solver: exact-ilp, exhaustive or greedy [default: exact-ilp]
    #[arg(long)]
    solver: Option<String>,
    /// Take reference labels from this hidden attribute instead of "labels" [default: none]
    #[arg(long, value_name = "DIM")]
    ref_attr: Option<String>,
    /// Worker threads; 1 runs sequentially [default: number of hardware threads]
    #[arg(long, value_name = "N")]
    parallel: Option<usize>,
    /// Stop after this many calls per backend [default: unlimited]
    #[arg(long, value_name = "N")]
    max_calls: Option<usize>,
    /// Concurrent in-flight calls per backend; also caps --parallel [default: unlimited]
    #[arg(long, value_name = "N")]
    concurrency: Option<usize>,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Number of clusters (required here or in the config file)
    #[arg(long)]
    k: Option<usize>,
    /// Assign every sample to exactly one cluster [default: off]
    #[arg(long)]
    commit: bool,
}

#[derive(Debug, Args)]
struct TaxonomyArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Clusters per level [default: 8]
    #[arg(long)]
    k: Option<usize>,
    /// Maximum tree depth below the root [default: 2]
    #[arg(long, value_name = "N")]
    max_depth: Option<usize>,
    /// Refine clusters with more members than this [default: 20]
    #[arg(long, value_name = "N")]
    split_threshold: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Labeled JSONL corpus
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// clusters.json written by `pas cluster`
    #[arg(long, value_name = "FILE", conflicts_with = "predictions")]
    clusters: Option<PathBuf>,
    /// JSONL predictions, one {"id", "cluster"} object per line
    #[arg(long, value_name = "FILE")]
    predictions: Option<PathBuf>,
    /// matrix.sparse.json, to add the candidate pool score [default: none]
    #[arg(long, value_name = "FILE")]
    matrix: Option<PathBuf>,
    /// Take reference labels from this hidden attribute instead of "labels" [default: none]
    #[arg(long, value_name = "DIM")]
    ref_attr: Option<String>,
    /// JSON array of sample ids to restrict evaluation to [default: all]
    #[arg(long, value_name = "FILE")]
    eval_ids: Option<PathBuf>,
    /// Where to write the report
    #[arg(long, value_name = "FILE", default_value = "metrics.json")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SolveArgs {
    /// Selection instance JSON
    #[arg(long, value_name = "FILE")]
    instance: PathBuf,
    /// exact-ilp, exhaustive or greedy
    #[arg(long, default_value = "exact-ilp")]
    solver: String,
    /// Also write the full solution JSON here [default: none]
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output JSONL file
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Dimensions as "name=v1,v2,...;name=..." [default: topic, style and language with 4 values each]
    #[arg(long)]
    dims: Option<String>,
    /// Samples per value combination
    #[arg(long, value_name = "N", default_value_t = 16)]
    per_combination: usize,
    /// Generation seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dimension copied into each sample's "labels" field [default: first dimension]
    #[arg(long, value_name = "DIM")]
    label_dim: Option<String>,
    /// Halve 7 random classes, then 3 of those again
    #[arg(long, conflicts_with = "noise")]
    imbalance: bool,
    /// Shrink 4 random classes to an eighth; writes <out>.eval_ids.json
    #[arg(long)]
    noise: bool,
    /// Seed for the perturbation's class sampling
    #[arg(long, default_value_t = 0)]
    perturb_seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Cluster(a) => cmd_cluster(a),
        Command::Taxonomy(a) => cmd_taxonomy(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<pas_core::Error>() {
            return match err.category() {
                Category::Validation => 1,
                Category::Backend => 2,
                Category::Solver => 3,
            };
        }
        if cause.downcast_ref::<BackendError>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<SolverError>().is_some() {
            return 3;
        }
    }
    1
}

/// Everything a cluster or taxonomy run needs, after merging flags over
/// the config file over built-in defaults.
struct Resolved {
    task: ClusteringTask,
    corpus_path: PathBuf,
    out: PathBuf,
    backends: Backends,
    specs: BTreeMap<String, String>,
    opts: RunOptions,
    cache: JudgmentCache,
    refs: Option<ReferenceLabels>,
    threads: usize,
}

fn build_backend(spec: &str, args: &RunArgs, file: &FileConfig) -> anyhow::Result<BackendHandle> {
    let parsed: BackendSpec = spec.parse().map_err(pas_core::Error::from)?;
    let mut h = parsed.build().map_err(pas_core::Error::from)?;
    if let Some(n) = args.max_calls.or(file.max_calls) {
        h = h.with_budget(n);
    }
    if let Some(n) = args.concurrency.or(file.concurrency) {
        h = h.with_concurrency(n);
    }
    if let Some(p) = args.audit.as_ref().or(file.audit.as_ref()) {
        h = h
            .with_audit(p)
            .with_context(|| format!("opening audit log {}", p.display()))?;
    }
    Ok(h)
}

fn reference_labels(corpus: &[Sample], attr: Option<&str>) -> Option<ReferenceLabels> {
    let refs = match attr {
        Some(dim) => ReferenceLabels::from_attr(corpus, dim),
        None => ReferenceLabels::from_labels(corpus),
    };
    (!refs.classes.is_empty()).then_some(refs)
}

fn resolve(
    args: &RunArgs,
    k_flag: Option<usize>,
    default_k: Option<usize>,
    commit: bool,
) -> anyhow::Result<Resolved> {
    let file = match &args.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let corpus_path = args.corpus.clone().or(file.corpus.clone()).ok_or_else(|| {
        pas_core::Error::InvalidInput("--corpus is required (see --help for usage)".into())
    })?;
    let goal = args.goal.clone().or(file.goal.clone()).ok_or_else(|| {
        pas_core::Error::InvalidInput("--goal is required (see --help for usage)".into())
    })?;
    let k = k_flag.or(file.k).or(default_k).ok_or_else(|| {
        pas_core::Error::InvalidInput("--k is required (see --help for usage)".into())
    })?;
    let corpus = load_corpus(&corpus_path)?;
    let refs = reference_labels(
        &corpus,
        args.ref_attr.as_deref().or(file.ref_attr.as_deref()),
    );

    let mut task = ClusteringTask::new(corpus, goal, k);
    task.lambda = args.lambda.or(file.lambda).unwrap_or(task.lambda);
    task.j_total = args.j.or(file.j).unwrap_or(task.j_total);
    task.j_per_prompt = args
        .j_per_prompt
        .or(file.j_per_prompt)
        .unwrap_or(task.j_per_prompt);
    task.iterations = args
        .iterations
        .or(file.iterations)
        .unwrap_or(task.iterations);
    task.context_budget = args
        .context_budget
        .or(file.context_budget)
        .unwrap_or(task.context_budget);
    task.max_prompts = args
        .max_prompts
        .or(file.max_prompts)
        .unwrap_or(task.max_prompts);
    task.seed = args.seed.or(file.seed).unwrap_or(0);
    if let Some(t) = args.template.as_ref().or(file.template.as_ref()) {
        task.template = t
            .parse::<TemplateKind>()
            .map_err(pas_core::Error::InvalidInput)?;
    }
    task.validate()?;

    let solver = match args.solver.as_ref().or(file.solver.as_ref()) {
        Some(s) => s
            .parse::<SolverKind>()
            .map_err(pas_core::Error::InvalidInput)?,
        None => SolverKind::ExactIlp,
    };
    let proposer_spec = args
        .proposer
        .clone()
        .or(file.proposer.clone())
        .unwrap_or_else(|| "oracle".into());
    let assigner_spec = args
        .assigner
        .clone()
        .or(file.assigner.clone())
        .unwrap_or_else(|| "oracle".into());
    let committer_spec = args
        .committer
        .clone()
        .or(file.committer.clone())
        .unwrap_or_else(|| assigner_spec.clone());
    let commit = commit || file.commit.unwrap_or(false);

    let proposer = build_backend(&proposer_spec, args, &file)?;
    let assigner = build_backend(&assigner_spec, args, &file)?;
    let committer = if commit {
        Some(build_backend(&committer_spec, args, &file)?)
    } else {
        None
    };
    let mut specs = BTreeMap::new();
    specs.insert("proposer".to_string(), proposer.id().to_string());
    specs.insert("assigner".to_string(), assigner.id().to_string());
    if let Some(c) = &committer {
        specs.insert("committer".to_string(), c.id().to_string());
    }

    let out = args
        .out
        .clone()
        .or(file.out.clone())
        .unwrap_or_else(|| PathBuf::from("pas-out"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let cache_path = args
        .cache
        .clone()
        .or(file.cache.clone())
        .unwrap_or_else(|| out.join("judgments.jsonl"));
    let cache = JudgmentCache::open(&cache_path)?;

    let hw = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut threads = args.parallel.or(file.parallel).unwrap_or(hw).max(1);
    if let Some(c) = args.concurrency.or(file.concurrency) {
        threads = threads.min(c.max(1));
    }
    let exec = if threads > 1 {
        Execution::Parallel
    } else {
        Execution::Sequential
    };

    Ok(Resolved {
        task,
        corpus_path,
        out,
        backends: Backends {
            proposer,
            assigner,
            committer,
        },
        specs,
        opts: RunOptions {
            solver,
            exec,
            commit,
            allow_fewer: false,
        },
        cache,
        refs,
        threads,
    })
}

/// Runs `f` on a pool of `threads` workers.
fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> anyhow::Result<T> {
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .context("starting worker threads")?;
        Ok(pool.install(f))
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        Ok(f())
    }
}

fn cmd_cluster(args: ClusterArgs) -> anyhow::Result<()> {
    let r = resolve(&args.run, args.k, None, args.commit)?;
    let run = with_threads(r.threads, || {
        run_pas(&r.task, &r.backends, &r.cache, &r.opts)
    })??;

    let ids: Vec<String> = r.task.corpus.iter().map(|s| s.id.clone()).collect();
    let metrics = match &r.refs {
        Some(refs) => Some(evaluate(&run.clusters, &ids, refs, Some(&run.matrix))?),
        None => None,
    };
    let mut seeds = BTreeMap::new();
    seeds.insert("task".to_string(), r.task.seed);
    save_artifacts(
        &r.out,
        &RunArtifacts {
            task: Some(&r.task),
            corpus_path: Some(r.corpus_path.display().to_string()),
            matrix: Some(&run.matrix),
            selection: Some(&run.selection),
            clusters: Some(&run.clusters),
            metrics: metrics.as_ref(),
            iterations: Some(&run.iterations),
            backends: r.specs.clone(),
            seeds,
            ..Default::default()
        },
    )?;

    for (i, c) in run.clusters.clusters.iter().enumerate() {
        println!("{i}\t{}\t{}", c.members.len(), c.explanation.text);
    }
    println!("uncovered\t{}", run.clusters.uncovered.len());
    if let Some(m) = &metrics {
        println!("macro_f1\t{:.2}", m.macro_f1);
    }
    for (id, n) in call_summary(&r.backends.handles()) {
        log::info!("{id}: {n} calls");
    }
    Ok(())
}

fn cmd_taxonomy(args: TaxonomyArgs) -> anyhow::Result<()> {
    let r = resolve(&args.run, args.k, Some(8), false)?;
    let file = match &args.run.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let tax = TaxonomyOptions {
        max_depth: args.max_depth.or(file.max_depth).unwrap_or(2),
        split_threshold: args.split_threshold.or(file.split_threshold).unwrap_or(20),
    };
    let tree = with_threads(r.threads, || {
        build_taxonomy(&r.task, &r.backends, &r.cache, &r.opts, &tax)
    })??;
    let mut seeds = BTreeMap::new();
    seeds.insert("task".to_string(), r.task.seed);
    save_artifacts(
        &r.out,
        &RunArtifacts {
            task: Some(&r.task),
            corpus_path: Some(r.corpus_path.display().to_string()),
            taxonomy: Some(&tree),
            backends: r.specs.clone(),
            seeds,
            ..Default::default()
        },
    )?;
    let text = tree.render();
    let path = r.out.join("taxonomy.txt");
    std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    print!("{text}");
    Ok(())
}

#[derive(Deserialize)]
struct Prediction {
    id: String,
    cluster: serde_json::Value,
}

fn load_predictions(path: &Path) -> anyhow::Result<ClusterSet> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut groups: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(line).map_err(|e| pas_core::Error::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let key = match p.cluster {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        };
        groups.entry(key).or_default().insert(p.id);
    }
    Ok(ClusterSet {
        clusters: groups
            .into_iter()
            .map(|(k, members)| pas_core::Cluster {
                explanation: pas_core::Explanation::new(k),
                members,
            })
            .collect(),
        ..Default::default()
    })
}

fn restrict_clusters(cs: &ClusterSet, keep: &BTreeSet<String>) -> ClusterSet {
    ClusterSet {
        clusters: cs
            .clusters
            .iter()
            .map(|c| pas_core::Cluster {
                explanation: c.explanation.clone(),
                members: c.members.intersection(keep).cloned().collect(),
            })
            .collect(),
        uncovered: cs.uncovered.intersection(keep).cloned().collect(),
        committed: cs.committed.as_ref().map(|m| {
            m.iter()
                .filter(|(id, _)| keep.contains(*id))
                .map(|(id, c)| (id.clone(), *c))
                .collect()
        }),
    }
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let mut clusters = match (&args.clusters, &args.predictions) {
        (Some(p), _) => read_artifact::<ClusterSet>(p)?,
        (None, Some(p)) => load_predictions(p)?,
        (None, None) => bail!(pas_core::Error::InvalidInput(
            "one of --clusters or --predictions is required".into()
        )),
    };
    let mut refs = reference_labels(&corpus, args.ref_attr.as_deref())
        .ok_or_else(|| pas_core::Error::InvalidInput("corpus has no reference labels".into()))?;
    let mut ids: Vec<String> = corpus.iter().map(|s| s.id.clone()).collect();
    if let Some(p) = &args.eval_ids {
        let text =
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let keep: BTreeSet<String> = serde_json::from_str(&text).map_err(pas_core::Error::from)?;
        refs = refs.restrict(&keep);
        clusters = restrict_clusters(&clusters, &keep);
        ids.retain(|id| keep.contains(id));
    }
    let matrix = match &args.matrix {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(matrix_from_json(&text)?)
        }
        None => None,
    };
    let report: EvalReport = evaluate(&clusters, &ids, &refs, matrix.as_ref())?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    std::fs::write(&args.out, text).with_context(|| format!("writing {}", args.out.display()))?;
    println!("macro_f1\t{:.2}", report.macro_f1);
    println!("covered_pct\t{:.2}", report.coverage.covered_pct);
    Ok(())
}

fn cmd_solve(args: SolveArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.instance)
        .map_err(|e| pas_core::Error::InvalidInput(format!("{}: {e}", args.instance.display())))?;
    let instance = SelectionInstance::from_json(&text)?;
    let solver: SolverKind = args.solver.parse().map_err(pas_core::Error::InvalidInput)?;
    let sol = solve_selection(&instance, solver).map_err(pas_core::Error::from)?;
    let names: Vec<&str> = sol
        .selected_indices()
        .into_iter()
        .map(|j| instance.matrix.column_meta()[j].text.as_str())
        .collect();
    println!("selected\t{}", names.join(", "));
    println!("objective\t{}", sol.objective);
    if let Some(p) = &args.out {
        let text = serde_json::to_string_pretty(&sol)? + "\n";
        std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn parse_dims(s: &str) -> anyhow::Result<Vec<Dimension>> {
    s.split(';')
        .filter(|d| !d.trim().is_empty())
        .map(|d| {
            let (name, values) = d.split_once('=').ok_or_else(|| {
                anyhow!(pas_core::Error::InvalidInput(format!(
                    "bad dimension `{d}`"
                )))
            })?;
            let values: Vec<&str> = values
                .split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .collect();
            Ok(Dimension::new(name.trim(), &values))
        })
        .collect()
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let dims = match &args.dims {
        Some(s) => parse_dims(s)?,
        None => default_dimensions(),
    };
    let label_dim = args
        .label_dim
        .clone()
        .or_else(|| dims.first().map(|d| d.name.clone()));
    let mut corpus =
        generate_synthetic(&dims, args.per_combination, args.seed, label_dim.as_deref())?;
    if args.imbalance || args.noise {
        let refs = ReferenceLabels::from_labels(&corpus);
        if args.imbalance {
            let p = perturb_imbalance(&corpus, &refs, args.perturb_seed)?;
            log::info!("halved {:?}, quartered {:?}", p.halved, p.quartered);
            corpus = p.corpus;
        } else {
            let p = perturb_noise(&corpus, &refs, args.perturb_seed)?;
            let mask = PathBuf::from(format!("{}.eval_ids.json", args.out.display()));
            std::fs::write(&mask, serde_json::to_string(&p.eval_ids)? + "\n")
                .with_context(|| format!("writing {}", mask.display()))?;
            log::info!("noise classes {:?}", p.noise_classes);
            corpus = p.corpus;
        }
    }
    save_corpus(&args.out, &corpus)?;
    println!("{}\t{}", args.out.display(), corpus.len());
    Ok(())
}
