use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crow::config::{load_config, DiscoveryConfig};
use crow::evaluation::{evaluate, EvalReport};
use crow::io::{load_embeddings, read_labels, read_predictions, save_embeddings, write_labels, write_predictions};
use crow::pipeline::{
    crow_discover, estimate_num_classes, kmeans_baseline, match_only, simple_baseline, ClassCount, DiscoveryOutcome,
    EstimateMode, MatchSummary,
};
use crow::synthgen::{generate, Scenario};
use crow::{ClassCatalog, EmbeddingSet, Error};

#[derive(Parser)]
#[command(name = "crow", version, about = "Discover novel classes in unlabeled target embeddings from a labeled source")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scenario: source.cef, target.cef, truth.csv, scenario.json.
    Synth(SynthArgs),
    /// Cluster, match and fine-tune.
    Discover(DiscoverArgs),
    /// Entropy-threshold baseline: classify, reject, cluster the rejects.
    BaselineSimple(SimpleArgs),
    /// K-means on the target alone, scored by clustering accuracy.
    BaselineKmeans(KmeansArgs),
    /// Pick the number of target classes from a range.
    EstimateK(EstimateArgs),
    /// Run only clustering and matching and dump the matching matrices.
    MatchOnly(MatchArgs),
    /// Score a predictions file against truth labels.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(Scenario::PRESETS))]
    preset: String,
    /// Overrides the preset's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON file with DiscoveryConfig fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_head: Option<f64>,
    #[arg(long)]
    lr_adapter: Option<f64>,
    #[arg(long, value_enum)]
    adapter: Option<AdapterArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    kmeans_max_iter: Option<usize>,
    #[arg(long)]
    kmeans_tol: Option<f64>,
    #[arg(long)]
    kmeans_restarts: Option<usize>,
    #[arg(long)]
    reg_full_target: bool,
    #[arg(long)]
    supervised_full_softmax: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum AdapterArg {
    None,
    Linear,
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum EstimateModeArg {
    #[default]
    Union,
    TargetOnly,
}

impl From<EstimateModeArg> for EstimateMode {
    fn from(m: EstimateModeArg) -> Self {
        match m {
            EstimateModeArg::Union => EstimateMode::Union,
            EstimateModeArg::TargetOnly => EstimateMode::TargetOnly,
        }
    }
}

#[derive(Args)]
struct Inputs {
    /// Labeled source embeddings (.cef or .csv).
    #[arg(long)]
    source: PathBuf,
    /// Unlabeled target embeddings (.cef or .csv).
    #[arg(long)]
    target: PathBuf,
    /// Optional `sample_index,label` file for the target; enables scoring.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(group(ArgGroup::new("k").required(true).args(["num_target_classes", "estimate"])))]
struct DiscoverArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    num_target_classes: Option<usize>,
    #[arg(long, requires_all = ["k_min", "k_max"])]
    estimate: bool,
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long, value_enum, default_value_t)]
    estimate_mode: EstimateModeArg,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SimpleArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    num_target_classes: usize,
    #[arg(long)]
    entropy_threshold: f64,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct KmeansArgs {
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    num_target_classes: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    k_min: usize,
    #[arg(long)]
    k_max: usize,
    #[arg(long, value_enum, default_value_t)]
    estimate_mode: EstimateModeArg,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    num_target_classes: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    seen_count: usize,
    /// Directory for report.json; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<DiscoveryConfig> {
        let mut overrides = BTreeMap::new();
        let mut set = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                overrides.insert(key.to_string(), v);
            }
        };
        set("tau", self.tau.map(|v| v.to_string()));
        set("lambda", self.lambda.map(|v| v.to_string()));
        set("temperature", self.temperature.map(|v| v.to_string()));
        set("iterations", self.iters.map(|v| v.to_string()));
        set("batch_size", self.batch_size.map(|v| v.to_string()));
        set("lr_head", self.lr_head.map(|v| v.to_string()));
        set("lr_adapter", self.lr_adapter.map(|v| v.to_string()));
        set("seed", self.seed.map(|v| v.to_string()));
        set("kmeans_max_iter", self.kmeans_max_iter.map(|v| v.to_string()));
        set("kmeans_tol", self.kmeans_tol.map(|v| v.to_string()));
        set("kmeans_restarts", self.kmeans_restarts.map(|v| v.to_string()));
        set(
            "adapter_kind",
            self.adapter.map(|a| match a {
                AdapterArg::None => "\"none\"".to_string(),
                AdapterArg::Linear => "\"linear-residual\"".to_string(),
            }),
        );
        set("reg_full_target", self.reg_full_target.then(|| "true".to_string()));
        set("supervised_full_softmax", self.supervised_full_softmax.then(|| "true".to_string()));
        let config = match &self.config {
            Some(path) => load_config(path, &overrides)?,
            None => DiscoveryConfig::from_json(Value::Null, &overrides)?,
        };
        Ok(config)
    }
}

/// Flag combinations clap cannot reject on its own; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn check_range(k_min: usize, k_max: usize) -> Result<()> {
    if k_min > k_max {
        return Err(Usage(format!("--k-min {k_min} exceeds --k-max {k_max}")).into());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            let usage = err.downcast_ref::<Usage>().is_some() || matches!(err.downcast_ref::<Error>(), Some(Error::Config(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> Result<String> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Discover(a) => discover(a),
        Command::BaselineSimple(a) => baseline_simple(a),
        Command::BaselineKmeans(a) => baseline_kmeans(a),
        Command::EstimateK(a) => estimate_k(a),
        Command::MatchOnly(a) => match_only_cmd(a),
        Command::Eval(a) => eval(a),
    }
}

fn load(path: &Path) -> Result<EmbeddingSet> {
    load_embeddings(path).map_err(|e| e.in_stage("load")).map_err(Into::into)
}

fn load_truth(path: Option<&Path>) -> Result<Option<Vec<u32>>> {
    path.map(|p| read_labels(p).map_err(|e| e.in_stage("load"))).transpose().map_err(Into::into)
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `invocation.json`: subcommand, tool version, seed and resolved config.
/// Subcommands without randomness record a null seed.
fn write_invocation(dir: &Path, subcommand: &str, seed: Option<u64>, config: Option<&DiscoveryConfig>, extra: Value) -> Result<()> {
    write_json(
        &dir.join("invocation.json"),
        &json!({
            "subcommand": subcommand,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": seed,
            "config": config,
            "arguments": extra,
        }),
    )
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn eval_summary(report: Option<&EvalReport>, predictions: usize) -> String {
    match report {
        Some(EvalReport { h_score: Some(h), seen_accuracy, unseen_accuracy, .. }) => format!(
            "h_score={h:.4} seen_accuracy={:.4} unseen_accuracy={:.4}",
            seen_accuracy.unwrap_or(0.0),
            unseen_accuracy.unwrap_or(0.0)
        ),
        Some(EvalReport { seen_accuracy: Some(s), .. }) => format!("seen_accuracy={s:.4} (no unseen classes in truth)"),
        Some(EvalReport { unseen_accuracy: Some(u), .. }) => format!("unseen_accuracy={u:.4} (no seen classes in truth)"),
        _ => format!("{predictions} predictions written"),
    }
}

fn write_outcome(dir: &Path, outcome: &DiscoveryOutcome) -> Result<()> {
    write_predictions(&outcome.predictions, dir.join("predictions.csv"))?;
    write_json(&dir.join("run_report.json"), &outcome.report)?;
    if let Some(eval) = &outcome.report.eval {
        write_json(&dir.join("report.json"), eval)?;
    }
    let mut log = fs::File::create(dir.join("train_log.jsonl")).context("creating train_log.jsonl")?;
    for entry in &outcome.training_log {
        writeln!(log, "{}", serde_json::to_string(entry)?)?;
    }
    outcome.model.save_checkpoint(dir, "model")?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<String> {
    let mut scenario = Scenario::preset(&a.preset).expect("clap restricts presets");
    if let Some(seed) = a.seed {
        scenario.seed = seed;
    }
    let data = generate(&scenario).map_err(|e| e.in_stage("generate"))?;
    create_out(&a.out)?;
    save_embeddings(&data.source, a.out.join("source.cef"))?;
    save_embeddings(&data.target, a.out.join("target.cef"))?;
    write_labels(&data.target_truth, a.out.join("truth.csv"))?;
    write_json(&a.out.join("scenario.json"), &scenario)?;
    write_invocation(&a.out, "synth", Some(scenario.seed), None, json!({ "preset": a.preset }))?;
    Ok(format!(
        "{}: {} source and {} target samples, {} target classes",
        a.preset,
        data.source.count(),
        data.target.count(),
        scenario.target_classes().len()
    ))
}

fn discover(a: DiscoverArgs) -> Result<String> {
    let config = a.config.resolve()?;
    let class_count = match (a.num_target_classes, a.k_min, a.k_max) {
        (Some(k), _, _) => ClassCount::Known(k),
        (None, Some(k_min), Some(k_max)) => {
            check_range(k_min, k_max)?;
            ClassCount::Estimate { k_min, k_max, mode: a.estimate_mode.into() }
        }
        _ => unreachable!("clap enforces --num-target-classes or --estimate with a range"),
    };
    let source = load(&a.inputs.source)?;
    let target = load(&a.inputs.target)?;
    let truth = load_truth(a.inputs.truth.as_deref())?;
    let outcome = crow_discover(&source, &target, class_count, &config, truth.as_deref())?;
    create_out(&a.inputs.out)?;
    write_outcome(&a.inputs.out, &outcome)?;
    write_invocation(
        &a.inputs.out,
        "discover",
        Some(config.seed),
        Some(&config),
        json!({
            "source": path_str(&a.inputs.source),
            "target": path_str(&a.inputs.target),
            "class_count": class_count,
        }),
    )?;
    Ok(eval_summary(outcome.report.eval.as_ref(), outcome.predictions.len()))
}

fn baseline_simple(a: SimpleArgs) -> Result<String> {
    let config = a.config.resolve()?;
    let source = load(&a.inputs.source)?;
    let target = load(&a.inputs.target)?;
    let truth = load_truth(a.inputs.truth.as_deref())?;
    let outcome = simple_baseline(
        &source,
        &target,
        a.num_target_classes,
        &config,
        a.entropy_threshold,
        truth.as_deref(),
    )?;
    create_out(&a.inputs.out)?;
    write_outcome(&a.inputs.out, &outcome)?;
    write_invocation(
        &a.inputs.out,
        "baseline-simple",
        Some(config.seed),
        Some(&config),
        json!({ "entropy_threshold": a.entropy_threshold, "num_target_classes": a.num_target_classes }),
    )?;
    Ok(eval_summary(outcome.report.eval.as_ref(), outcome.predictions.len()))
}

fn baseline_kmeans(a: KmeansArgs) -> Result<String> {
    let config = a.config.resolve()?;
    let target = load(&a.target)?;
    let truth = read_labels(&a.truth).map_err(|e| e.in_stage("load"))?;
    let report = kmeans_baseline(&target, a.num_target_classes, &truth, &config).map_err(|e| e.in_stage("cluster"))?;
    create_out(&a.out)?;
    let clusters: Vec<u32> = report.assignments.iter().map(|&c| c as u32).collect();
    write_labels(&clusters, a.out.join("clusters.csv"))?;
    write_json(&a.out.join("kmeans_report.json"), &json!({ "k": report.k, "accuracy": report.accuracy, "inertia": report.inertia }))?;
    write_invocation(&a.out, "baseline-kmeans", Some(config.seed), Some(&config), json!({ "num_target_classes": a.num_target_classes }))?;
    Ok(format!("clustering_accuracy={:.4}", report.accuracy))
}

fn estimate_k(a: EstimateArgs) -> Result<String> {
    let config = a.config.resolve()?;
    check_range(a.k_min, a.k_max)?;
    let source = load(&a.source)?;
    let target = load(&a.target)?;
    let grid: Vec<usize> = (a.k_min..=a.k_max).collect();
    let estimate = estimate_num_classes(&source, &target, &grid, &config, a.estimate_mode.into())
        .map_err(|e| e.in_stage("estimate"))?;
    create_out(&a.out)?;
    write_json(&a.out.join("estimate.json"), &estimate)?;
    write_invocation(&a.out, "estimate-k", Some(config.seed), Some(&config), json!({ "k_min": a.k_min, "k_max": a.k_max }))?;
    Ok(format!("estimated_k={}", estimate.k))
}

fn match_only_cmd(a: MatchArgs) -> Result<String> {
    let config = a.config.resolve()?;
    let source = load(&a.source)?;
    let target = load(&a.target)?;
    let (_, target_protos, matched) = match_only(&source, &target, a.num_target_classes, &config)?;
    create_out(&a.out)?;
    write_json(&a.out.join("match.json"), &matched)?;
    write_json(&a.out.join("match_summary.json"), &MatchSummary::from(&matched))?;
    save_embeddings(&target_protos.to_embedding_set()?, a.out.join("target_prototypes.cef"))?;
    write_invocation(&a.out, "match-only", Some(config.seed), Some(&config), json!({ "num_target_classes": a.num_target_classes }))?;
    Ok(format!(
        "matched_prototypes={} unseen_prototypes={}",
        matched.matched_prototype_count(),
        matched.unseen_prototype_indices.len()
    ))
}

fn eval(a: EvalArgs) -> Result<String> {
    let pred = read_predictions(&a.pred).map_err(|e| e.in_stage("load"))?;
    let truth = read_labels(&a.truth).map_err(|e| e.in_stage("load"))?;
    let catalog = ClassCatalog::new(a.seen_count, None)?;
    let report = evaluate(&pred, &truth, &catalog).map_err(|e: Error| e.in_stage("eval"))?;
    match &a.out {
        Some(dir) => {
            create_out(dir)?;
            write_json(&dir.join("report.json"), &report)?;
            write_invocation(dir, "eval", None, None, json!({ "seen_count": a.seen_count }))?;
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(eval_summary(Some(&report), pred.len()))
}
