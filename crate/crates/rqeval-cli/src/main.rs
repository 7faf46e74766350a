//! Command-line experiment runner.
//!
//! Settings resolve with precedence command line > config file >
//! defaults. Exit codes: 0 success, 1 configuration or data error, 2
//! completed with more failures than the configured tolerance.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use rqeval::dataset::{
    adapter_for, generate_traces, load_dataset, read_drafts, sample, sample_size,
    write_dataset, write_drafts,
};
use rqeval::eval::default_registry;
use rqeval::gateway::mock::MockScript;
use rqeval::gateway::{Gateway, GatewayConfig};
use rqeval::model::{DatasetRef, RunManifest};
use rqeval::runner::{
    analyze_mismatches, compute_report, render_ablation_table, render_distribution,
    render_report_table, render_tau_table, run_ablations, run_experiment, tau_sweep,
};

#[derive(Parser)]
#[command(name = "rqeval", version, about = "Reasoning-quality evaluation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate datasets with one evaluator, resumably.
    Run(RunArgs),
    /// Metric table over completed runs.
    Report(ReportArgs),
    /// Compare full VERA against its two ablated variants.
    Ablate(RunArgs),
    /// Recombine a completed run's scores over a grid of tau values.
    SweepTau(SweepTauArgs),
    /// Mismatch taxonomy pipeline over a completed run.
    Analyze(AnalyzeArgs),
    /// Cochran sample-size calculator and dataset sampler.
    Sample(SampleArgs),
    /// Generate reasoning traces for tasks that lack them.
    GenTraces(GenTracesArgs),
    /// Check dataset files and print label counts.
    Validate(ValidateArgs),
}

/// Settings shared by the experiment-driving commands. Any value not
/// given here falls back to the config file, then to defaults.
#[derive(Args, Clone, Default)]
struct CommonOpts {
    /// JSON config file with the same keys as these flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset as ID=PATH (or just PATH; the file stem becomes the id).
    /// Repeatable.
    #[arg(long = "dataset", value_name = "ID=PATH")]
    datasets: Vec<String>,
    /// Evaluator id; see `run --help` for the built-in set.
    #[arg(long)]
    evaluator: Option<String>,
    /// Judge model id.
    #[arg(long)]
    model: Option<String>,
    /// Embedding model id (taxonomy preclustering).
    #[arg(long)]
    embedding_model: Option<String>,
    /// Analyst model id (mismatch diagnosis and consolidation).
    #[arg(long)]
    analyst_model: Option<String>,
    #[arg(long)]
    reps: Option<u32>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    no_verification: bool,
    #[arg(long)]
    no_ambiguity: bool,
    /// Response cache directory. Unset disables caching.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run against a scripted mock provider instead of a live endpoint.
    #[arg(long)]
    mock_script: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Fraction of failed evaluations tolerated before exit code 2.
    #[arg(long)]
    max_failure_rate: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonOpts,
}

#[derive(Args)]
struct ReportArgs {
    /// Completed run directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Pool repetitions into one sample set instead of averaging
    /// per-repetition metrics.
    #[arg(long)]
    pool: bool,
    /// Also write report.json and report.txt here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SweepTauArgs {
    /// Completed VERA run directory.
    run: PathBuf,
    /// Comma-separated tau values. Default: 0.0 through 1.0 in steps of
    /// 0.1.
    #[arg(long)]
    taus: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Completed run directory.
    run: PathBuf,
    /// Repetition to analyze.
    #[arg(long, default_value_t = 0)]
    rep: u32,
    /// Cosine-distance cutoff for label preclustering.
    #[arg(long, default_value_t = rqeval::mismatch::DEFAULT_CLUSTER_CUTOFF)]
    cutoff: f64,
    #[command(flatten)]
    common: CommonOpts,
}

#[derive(Args)]
struct SampleArgs {
    /// Print the Cochran sample size for this population and exit
    /// (unless --input is also given).
    #[arg(long)]
    population: Option<u64>,
    #[arg(long, default_value_t = 0.90)]
    confidence: f64,
    #[arg(long, default_value_t = 0.05)]
    margin: f64,
    /// Canonical dataset to sample from.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Sample size; computed via Cochran from the input size when omitted.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the sampled dataset.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GenTracesArgs {
    /// JSONL of draft tasks (id, category, question).
    input: PathBuf,
    /// Where to write drafts with generated chains and outputs.
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    common: CommonOpts,
}

#[derive(Args)]
struct ValidateArgs {
    /// Dataset as ID=PATH (or just PATH). Repeatable.
    #[arg(long = "dataset", value_name = "ID=PATH", required = true)]
    datasets: Vec<String>,
    /// Treat inputs as released-benchmark files and import them through
    /// the adapter registered for each id.
    #[arg(long)]
    import: bool,
}

/// Config-file counterpart of [`CommonOpts`].
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    datasets: Option<Vec<String>>,
    evaluator: Option<String>,
    model: Option<String>,
    embedding_model: Option<String>,
    analyst_model: Option<String>,
    long_context_model: Option<String>,
    long_context_char_budget: Option<usize>,
    reps: Option<u32>,
    tau: Option<f64>,
    no_verification: Option<bool>,
    no_ambiguity: Option<bool>,
    cache_dir: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    seed: Option<u64>,
    mock_script: Option<PathBuf>,
    workers: Option<usize>,
    max_failure_rate: Option<f64>,
    max_tool_rounds: Option<u32>,
    debate_rounds: Option<u32>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn parse_dataset_spec(spec: &str) -> Result<DatasetRef> {
    if let Some((id, path)) = spec.split_once('=') {
        if id.trim().is_empty() {
            bail!("dataset spec {spec:?} has an empty id");
        }
        return Ok(DatasetRef {
            dataset_id: id.trim().to_string(),
            path: PathBuf::from(path),
        });
    }
    let path = PathBuf::from(spec);
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .filter(|s| !s.is_empty())
        .with_context(|| format!("dataset spec {spec:?} has no usable file stem; pass ID=PATH"))?;
    Ok(DatasetRef {
        dataset_id: stem.to_string(),
        path,
    })
}

struct Resolved {
    manifest: RunManifest,
    cache_dir: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    mock_script: Option<PathBuf>,
}

fn resolve(opts: &CommonOpts) -> Result<Resolved> {
    let file = load_file_config(opts.config.as_deref())?;
    let evaluator = opts
        .evaluator
        .clone()
        .or(file.evaluator)
        .unwrap_or_else(|| "vera".to_string());
    let mut manifest = RunManifest::new(&evaluator);

    let dataset_specs: Vec<String> = if !opts.datasets.is_empty() {
        opts.datasets.clone()
    } else {
        file.datasets.unwrap_or_default()
    };
    manifest.datasets = dataset_specs
        .iter()
        .map(|s| parse_dataset_spec(s))
        .collect::<Result<_>>()?;

    if let Some(model) = opts.model.clone().or(file.model) {
        manifest.judge_model_id = model.clone();
        manifest.analyst_model_id = model;
    }
    if let Some(model) = opts.embedding_model.clone().or(file.embedding_model) {
        manifest.embedding_model_id = model;
    }
    if let Some(model) = opts.analyst_model.clone().or(file.analyst_model) {
        manifest.analyst_model_id = model;
    }
    manifest.long_context_model_id = file.long_context_model;
    if let Some(budget) = file.long_context_char_budget {
        manifest.long_context_char_budget = budget;
    }
    if let Some(reps) = opts.reps.or(file.reps) {
        manifest.repetitions = reps;
    }
    if let Some(tau) = opts.tau.or(file.tau) {
        manifest.tau = tau;
    }
    manifest.no_verification = opts.no_verification || file.no_verification.unwrap_or(false);
    manifest.no_ambiguity = opts.no_ambiguity || file.no_ambiguity.unwrap_or(false);
    if let Some(seed) = opts.seed.or(file.seed) {
        manifest.seed = seed;
    }
    if let Some(workers) = opts.workers.or(file.workers) {
        manifest.workers = workers;
    }
    if let Some(rate) = opts.max_failure_rate.or(file.max_failure_rate) {
        manifest.max_failure_rate = rate;
    }
    if let Some(rounds) = file.max_tool_rounds {
        manifest.max_tool_rounds = rounds;
    }
    if let Some(rounds) = file.debate_rounds {
        manifest.debate_rounds = rounds;
    }

    Ok(Resolved {
        manifest,
        cache_dir: opts.cache_dir.clone().or(file.cache_dir),
        out_dir: opts.out_dir.clone().or(file.out_dir),
        mock_script: opts.mock_script.clone().or(file.mock_script),
    })
}

fn build_gateway(resolved: &Resolved) -> Result<Gateway> {
    let config = GatewayConfig {
        cache_dir: resolved.cache_dir.clone(),
        max_in_flight: resolved.manifest.workers.max(1),
        ..GatewayConfig::default()
    };
    match &resolved.mock_script {
        Some(path) => {
            let script = MockScript::from_file(path)
                .with_context(|| format!("loading mock script {}", path.display()))?;
            Ok(Gateway::mock(script, config))
        }
        None => Gateway::live_from_env(config).context(
            "no --mock-script given and no live provider configured; \
             set OPENAI_API_KEY (and optionally OPENAI_BASE_URL)",
        ),
    }
}

fn out_dir_or(resolved: &Resolved, fallback: &str) -> PathBuf {
    resolved
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(fallback))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn cmd_run(args: &RunArgs) -> Result<u8> {
    let resolved = resolve(&args.common)?;
    let gateway = build_gateway(&resolved)?;
    let registry = default_registry();
    let run_dir = out_dir_or(&resolved, &resolved.manifest.evaluator_id);
    let outcome = run_experiment(&resolved.manifest, &run_dir, &gateway, &registry)?;
    println!(
        "{}: {} results ({} ok, {} failed) in {}",
        resolved.manifest.evaluator_id,
        outcome.summary.total_results,
        outcome.summary.ok_results,
        outcome.summary.failed_results,
        outcome.run_dir.display()
    );
    for failure in &outcome.summary.failures {
        println!(
            "  failed rep {} {}/{}: {}",
            failure.repetition, failure.dataset_id, failure.instance_id, failure.error
        );
    }
    Ok(if outcome.failure_rate_exceeded { 2 } else { 0 })
}

fn cmd_report(args: &ReportArgs) -> Result<u8> {
    let table = compute_report(&args.runs, args.pool)?;
    let text = render_report_table(&table);
    print!("{}", text);
    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("report.json"), &table)?;
        write_text(&dir.join("report.txt"), &text)?;
    }
    Ok(0)
}

fn cmd_ablate(args: &RunArgs) -> Result<u8> {
    let resolved = resolve(&args.common)?;
    let gateway = build_gateway(&resolved)?;
    let registry = default_registry();
    let out_root = out_dir_or(&resolved, "ablations");
    let (report, outcomes) =
        run_ablations(&resolved.manifest, &out_root, &gateway, &registry)?;
    print!("{}", render_ablation_table(&report));
    println!("(runs under {})", out_root.display());
    Ok(if outcomes.iter().any(|o| o.failure_rate_exceeded) {
        2
    } else {
        0
    })
}

fn parse_taus(spec: Option<&str>) -> Result<Vec<f64>> {
    match spec {
        None => Ok((0..=10).map(|i| i as f64 / 10.0).collect()),
        Some(s) => s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .with_context(|| format!("bad tau value {t:?}"))
            })
            .collect(),
    }
}

fn cmd_sweep_tau(args: &SweepTauArgs) -> Result<u8> {
    let taus = parse_taus(args.taus.as_deref())?;
    let report = tau_sweep(&args.run, &taus)?;
    let text = render_tau_table(&report);
    print!("{}", text);
    let dir = args.out_dir.clone().unwrap_or_else(|| args.run.clone());
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("tau_sweep.json"), &report)?;
    write_text(&dir.join("tau_sweep.txt"), &text)?;
    Ok(0)
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<u8> {
    let resolved = resolve(&args.common)?;
    let gateway = build_gateway(&resolved)?;
    let registry = default_registry();
    let outcome = analyze_mismatches(&args.run, args.rep, &gateway, &registry, args.cutoff)?;
    println!(
        "repetition {}: {} missed errors, {} false alarms, {} agreements, {} failed results",
        outcome.repetition,
        outcome.agreement.missed_errors,
        outcome.agreement.false_alarms,
        outcome.agreement.agree_high + outcome.agreement.agree_low,
        outcome.agreement.failed_results
    );
    match &outcome.distribution {
        Some(distribution) => print!("{}", render_distribution(distribution)),
        None => println!("no mismatches; nothing to analyze further"),
    }
    println!("(artifacts under {})", args.run.join("analysis").display());
    Ok(0)
}

fn cmd_sample(args: &SampleArgs) -> Result<u8> {
    match &args.input {
        None => {
            let population = args
                .population
                .context("pass --population for the calculator, or --input to sample a file")?;
            let n = sample_size(population, args.confidence, args.margin)?;
            println!(
                "population {} at {:.0}% confidence, {:.0}% margin -> sample {}",
                population,
                args.confidence * 100.0,
                args.margin * 100.0,
                n
            );
            Ok(0)
        }
        Some(input) => {
            let dataset_id = input
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("dataset");
            let (instances, stats) = load_dataset(input, dataset_id)?;
            let n = match args.n {
                Some(n) => n,
                None => sample_size(instances.len() as u64, args.confidence, args.margin)?
                    as usize,
            };
            let sampled = sample(&instances, n, args.seed)?;
            let output = args
                .output
                .clone()
                .context("pass --output for the sampled dataset")?;
            write_dataset(&output, &sampled)?;
            println!(
                "sampled {} of {} instances ({} correct / {} incorrect in source) -> {}",
                sampled.len(),
                stats.instances,
                stats.correct,
                stats.incorrect,
                output.display()
            );
            Ok(0)
        }
    }
}

fn cmd_gen_traces(args: &GenTracesArgs) -> Result<u8> {
    let resolved = resolve(&args.common)?;
    let gateway = build_gateway(&resolved)?;
    let drafts = read_drafts(&args.input)?;
    let report = generate_traces(
        &drafts,
        &gateway,
        &resolved.manifest.judge_model_id,
        resolved.manifest.workers,
    );
    write_drafts(&args.output, &report.completed)?;
    println!(
        "traced {} of {} tasks -> {}",
        report.completed.len(),
        drafts.len(),
        args.output.display()
    );
    for (id, reason) in &report.failures {
        println!("  skipped {}: {}", id, reason);
    }
    Ok(0)
}

fn cmd_validate(args: &ValidateArgs) -> Result<u8> {
    for spec in &args.datasets {
        let dref = parse_dataset_spec(spec)?;
        let (_, stats) = if args.import {
            adapter_for(&dref.dataset_id)?.import(&dref.path)?
        } else {
            load_dataset(&dref.path, &dref.dataset_id)?
        };
        println!(
            "{}: {} instances, {} correct / {} incorrect",
            stats.dataset_id, stats.instances, stats.correct, stats.incorrect
        );
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Report(args) => cmd_report(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::SweepTau(args) => cmd_sweep_tau(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Sample(args) => cmd_sample(args),
        Command::GenTraces(args) => cmd_gen_traces(args),
        Command::Validate(args) => cmd_validate(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {:#}", err);
            ExitCode::from(1)
        }
    }
}
