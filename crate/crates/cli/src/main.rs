//! `ctrank`: validate datasets, build bias suites, run assessment grids,
//! and re-render reports from recorded runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ctrank_core::backend::{BackendHandle, DecodeParams, TranscriptSink};
use ctrank_core::harness::{
    compute_bias_report, create_run_dir, load_records, render_report, result_rows, run_grid,
    write_config_json, BackendSpec, BiasReport, ExperimentPlan,
};
use ctrank_core::metrics::significance_stars;
use ctrank_core::perturb::{
    build_position_suite, build_verbosity_suite, build_wording_suite, export_suite,
    BackendRephraser, BiasKind, BiasSuite,
};
use ctrank_core::strategies::StrategyKind;
use ctrank_core::{load_dataset, Dataset, ExperimentConfig, GroundTruth, PairwiseOrderMode};

#[derive(Parser)]
#[command(
    name = "ctrank",
    version,
    about = "Impact-ranking assessment harness for conspiracy-theory datasets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset utilities.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Execute an experiment grid and write a run directory.
    Run(RunArgs),
    /// Re-render reports from an existing records.jsonl.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Load and validate a dataset file, printing the derived ground truth.
    Validate { path: PathBuf },
    /// Build bias suites and export them as dataset files plus manifests.
    Perturb(PerturbArgs),
}

#[derive(Args)]
struct PerturbArgs {
    path: PathBuf,
    /// Comma-separated suite kinds: position, wording, verbosity.
    #[arg(long, value_delimiter = ',', required = true)]
    kinds: Vec<String>,
    /// Number of position permutations.
    #[arg(long, default_value_t = 12)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for suite files and manifests.
    #[arg(long, default_value = "suites")]
    out: PathBuf,
    /// Backend id (from --config) used to rephrase items lacking file
    /// variants.
    #[arg(long)]
    rephraser: Option<String>,
    /// Config file providing backend definitions for --rephraser.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Run-directory label.
    #[arg(long)]
    name: Option<String>,
    /// Root directory for run outputs.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repetitions: Option<u32>,
    #[arg(long)]
    workers: Option<usize>,
    /// Comma-separated strategies; "all" expands to all six.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    /// Pairwise presentation mode: single or both.
    #[arg(long)]
    pairwise_order: Option<PairwiseOrderMode>,
    /// Comma-separated suites to build and include: position, wording,
    /// verbosity.
    #[arg(long, value_delimiter = ',')]
    suites: Option<Vec<String>>,
    #[arg(long)]
    position_count: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Path to a records.jsonl produced by `run`.
    #[arg(long)]
    records: PathBuf,
    /// Directory to render report files into.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

/// Resolved run configuration; serialized verbatim into the run directory
/// as config.json before any backend call.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    dataset: PathBuf,
    name: String,
    out: PathBuf,
    seed: u64,
    repetitions: u32,
    max_reflection_rounds: u32,
    max_debate_rounds: u32,
    pairwise_order_mode: PairwiseOrderMode,
    parse_retries: u32,
    workers: usize,
    cache: bool,
    significance_resamples: u32,
    strategies: Vec<StrategyKind>,
    backends: Vec<BackendSpec>,
    /// Debate judge backend; defaults to each cell's own backend. The
    /// judge only selects between debater solutions, so it need not (and
    /// usually should not) appear in `backends`.
    judge: Option<BackendSpec>,
    suites: SuiteOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/default_cts.json"),
            name: "run".into(),
            out: PathBuf::from("runs"),
            seed: 0,
            repetitions: 3,
            max_reflection_rounds: 3,
            max_debate_rounds: 3,
            pairwise_order_mode: PairwiseOrderMode::Single,
            parse_retries: 2,
            workers: 0,
            cache: false,
            significance_resamples: 10_000,
            strategies: StrategyKind::ALL.to_vec(),
            backends: Vec::new(),
            judge: None,
            suites: SuiteOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct SuiteOptions {
    position: bool,
    wording: bool,
    verbosity: bool,
    position_count: Option<usize>,
    /// Backend id used to rephrase items lacking file variants.
    rephraser: Option<String>,
}

fn parse_bias_kind(raw: &str) -> Result<BiasKind> {
    match raw.trim() {
        "position" => Ok(BiasKind::Position),
        "wording" => Ok(BiasKind::Wording),
        "verbosity" => Ok(BiasKind::Verbosity),
        other => bail!("unknown suite kind '{other}' (expected position, wording, verbosity)"),
    }
}

fn parse_strategies(raw: &[String]) -> Result<Vec<StrategyKind>> {
    let mut out = Vec::new();
    for token in raw {
        let token = token.trim();
        if token == "all" {
            out.extend(StrategyKind::ALL);
        } else {
            out.push(token.parse().map_err(|e: String| anyhow::anyhow!(e))?);
        }
    }
    if out.is_empty() {
        bail!("no strategies selected");
    }
    Ok(out)
}

fn print_ground_truth(dataset: &Dataset, truth: &GroundTruth) {
    println!(
        "dataset '{}': {} items, ground truth (rank. id text):",
        dataset.name,
        dataset.len()
    );
    for id in truth.ideal_order() {
        let item = dataset.item(id).expect("id from ground truth");
        println!(
            "  {:>2}. [{}] ({:.1}%) {}",
            truth.rank_of(id).unwrap(),
            id,
            item.belief_pct,
            item.text
        );
    }
}

fn cmd_dataset_validate(path: &Path) -> Result<()> {
    let (dataset, truth) =
        load_dataset(path).with_context(|| format!("validating {}", path.display()))?;
    print_ground_truth(&dataset, &truth);
    Ok(())
}

/// Builds one rephrasing backend handle from a config, when requested.
fn rephraser_handle(
    config: Option<&RunConfig>,
    backend_id: Option<&str>,
    dataset: &Dataset,
    sink: &TranscriptSink,
) -> Result<Option<BackendHandle>> {
    let Some(backend_id) = backend_id else {
        return Ok(None);
    };
    let config = config.context("--rephraser requires --config with backend definitions")?;
    let spec = config
        .backends
        .iter()
        .find(|b| b.id() == backend_id)
        .with_context(|| format!("no backend '{backend_id}' in config"))?;
    let latent: BTreeMap<_, _> = dataset
        .items
        .iter()
        .map(|it| (it.id, it.belief_pct))
        .collect();
    let pool_backend = match spec {
        BackendSpec::Http { config, .. } => {
            let backend = ctrank_core::backend::HttpBackend::new(config.clone())?;
            std::sync::Arc::new(backend) as std::sync::Arc<dyn ctrank_core::backend::ChatBackend>
        }
        BackendSpec::Simulated {
            id,
            noise_sigma,
            position_bias_strength,
            seed,
            latent_scores,
        } => std::sync::Arc::new(ctrank_core::backend::SimulatedAgent::new(
            id.clone(),
            ctrank_core::backend::SimulatedAgentConfig {
                latent_scores: latent_scores.clone().unwrap_or(latent),
                noise_sigma: *noise_sigma,
                position_bias_strength: *position_bias_strength,
                seed: *seed,
            },
        )),
    };
    Ok(Some(BackendHandle::new(
        pool_backend,
        DecodeParams::default(),
        1,
        sink.clone(),
    )))
}

fn cmd_perturb(args: &PerturbArgs) -> Result<()> {
    let (dataset, _) = load_dataset(&args.path)?;
    let kinds = args
        .kinds
        .iter()
        .map(|k| parse_bias_kind(k))
        .collect::<Result<Vec<_>>>()?;

    let config: Option<RunConfig> = match &args.config {
        Some(path) => Some(read_config(path)?),
        None => None,
    };
    let sink = TranscriptSink::new();
    let handle = rephraser_handle(config.as_ref(), args.rephraser.as_deref(), &dataset, &sink)?;
    let rephraser = handle.as_ref().map(BackendRephraser::new);
    let rephraser_dyn = rephraser
        .as_ref()
        .map(|r| r as &dyn ctrank_core::perturb::Rephraser);

    for kind in kinds {
        let suite = match kind {
            BiasKind::Position => build_position_suite(&dataset, args.count, args.seed)?,
            BiasKind::Wording => build_wording_suite(&dataset, rephraser_dyn)?,
            BiasKind::Verbosity => build_verbosity_suite(&dataset, rephraser_dyn)?,
        };
        let manifest = export_suite(&suite, &args.out)?;
        println!(
            "{kind}: {} dataset file(s), {} item slots -> {}",
            manifest.files.len(),
            suite.item_slots(),
            args.out.display()
        );
    }
    Ok(())
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let raw = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&raw).with_context(|| format!("parsing config {}", path.display()))
}

fn resolve_run_config(args: &RunArgs) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => read_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(dataset) = &args.dataset {
        config.dataset = dataset.clone();
    }
    if let Some(name) = &args.name {
        config.name = name.clone();
    }
    if let Some(out) = &args.out {
        config.out = out.clone();
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(repetitions) = args.repetitions {
        config.repetitions = repetitions;
    }
    if let Some(workers) = args.workers {
        config.workers = workers;
    }
    if let Some(strategies) = &args.strategies {
        config.strategies = parse_strategies(strategies)?;
    }
    if let Some(mode) = args.pairwise_order {
        config.pairwise_order_mode = mode;
    }
    if let Some(suites) = &args.suites {
        config.suites.position = false;
        config.suites.wording = false;
        config.suites.verbosity = false;
        for kind in suites {
            match parse_bias_kind(kind)? {
                BiasKind::Position => config.suites.position = true,
                BiasKind::Wording => config.suites.wording = true,
                BiasKind::Verbosity => config.suites.verbosity = true,
            }
        }
    }
    if let Some(count) = args.position_count {
        config.suites.position_count = Some(count);
    }
    if config.backends.is_empty() {
        bail!("run needs at least one backend (set \"backends\" in the config file)");
    }
    if config.strategies.is_empty() {
        bail!("run needs at least one strategy");
    }
    Ok(config)
}

fn build_suites(
    config: &RunConfig,
    dataset: &Dataset,
    sink: &TranscriptSink,
) -> Result<Vec<BiasSuite>> {
    let mut suites = Vec::new();
    let handle = rephraser_handle(
        Some(config),
        config.suites.rephraser.as_deref(),
        dataset,
        sink,
    )?;
    let rephraser = handle.as_ref().map(BackendRephraser::new);
    let rephraser_dyn = rephraser
        .as_ref()
        .map(|r| r as &dyn ctrank_core::perturb::Rephraser);
    if config.suites.position {
        let count = config.suites.position_count.unwrap_or(12);
        suites.push(build_position_suite(dataset, count, config.seed)?);
    }
    if config.suites.wording {
        suites.push(build_wording_suite(dataset, rephraser_dyn)?);
    }
    if config.suites.verbosity {
        suites.push(build_verbosity_suite(dataset, rephraser_dyn)?);
    }
    Ok(suites)
}

fn print_summary(records: &[ctrank_core::harness::RunRecord], bias: &BiasReport) {
    println!(
        "{:<14} {:<16} {:>8} {:>8} {:>8} {:>6} {:>7} {:>9}",
        "backend", "strategy", "r_s", "tau", "ndcg", "stars", "calls", "wall_ms"
    );
    for row in result_rows(records) {
        let (rs, tau, nd) = match row.mean {
            Some(m) => (
                format!("{:.3}", m.spearman),
                format!("{:.3}", m.kendall),
                format!("{:.3}", m.ndcg),
            ),
            None => ("-".into(), "-".into(), "-".into()),
        };
        let stars = row.p_median.map(significance_stars).unwrap_or_default();
        println!(
            "{:<14} {:<16} {:>8} {:>8} {:>8} {:>6} {:>7} {:>9}",
            row.backend, row.strategy, rs, tau, nd, stars, row.calls, row.wall_ms
        );
    }
    if !bias.rows.is_empty() {
        println!();
        println!(
            "{:<14} {:<16} {:<10} {:<11} {:>10} {:>10} {:>10}",
            "backend", "strategy", "suite", "variant", "d_r_s", "d_tau", "d_ndcg"
        );
        for row in &bias.rows {
            println!(
                "{:<14} {:<16} {:<10} {:<11} {:>10.3} {:>10.3} {:>10.3}",
                row.backend,
                row.strategy,
                row.suite,
                row.variant,
                row.delta.spearman,
                row.delta.kendall,
                row.delta.ndcg
            );
        }
    }
}

fn cmd_run(args: &RunArgs) -> Result<bool> {
    let config = resolve_run_config(args)?;
    let (dataset, truth) = load_dataset(&config.dataset)?;

    let paths = create_run_dir(&config.out, &config.name)?;
    // Auditability precedes execution: the resolved config lands on disk
    // before any backend call.
    write_config_json(&paths.config_json, &config)?;

    let rephrase_sink = TranscriptSink::new();
    let suites = build_suites(&config, &dataset, &rephrase_sink)?;
    let suites_dir = paths.root.join("suites");
    for suite in &suites {
        export_suite(suite, &suites_dir)?;
    }

    let mut plan = ExperimentPlan::new(
        ExperimentConfig {
            repetitions: config.repetitions,
            max_reflection_rounds: config.max_reflection_rounds,
            max_debate_rounds: config.max_debate_rounds,
            pairwise_order_mode: config.pairwise_order_mode,
            parse_retries: config.parse_retries,
            rng_seed: config.seed,
        },
        dataset,
        truth,
        config.strategies.clone(),
        config.backends.clone(),
    );
    plan.suites = suites;
    plan.judge = config.judge.clone();
    plan.workers = config.workers;
    plan.cache_enabled = config.cache;
    plan.significance_resamples = config.significance_resamples;

    let outcome = run_grid(&plan, &paths.root)?;
    let bias = if outcome.records.iter().any(|r| !r.variant.is_base()) {
        compute_bias_report(&outcome.records)?
    } else {
        BiasReport::default()
    };
    render_report(&outcome.records, &bias, &paths.root)?;

    println!("run directory: {}", paths.root.display());
    println!(
        "records: {} | transcript entries: {} (retries: {})",
        outcome.records.len(),
        outcome.transcript_entries,
        outcome.retry_entries
    );
    println!();
    print_summary(&outcome.records, &bias);
    if outcome.any_failed {
        eprintln!("warning: at least one cell hard-failed; see records.jsonl");
    }
    Ok(outcome.any_failed)
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let records = load_records(&args.records)?;
    let bias = if records.iter().any(|r| !r.variant.is_base()) {
        compute_bias_report(&records)?
    } else {
        BiasReport::default()
    };
    let paths = render_report(&records, &bias, &args.out)?;
    print_summary(&records, &bias);
    println!();
    println!("wrote {}", paths.results_csv.display());
    println!("wrote {}", paths.bias_csv.display());
    println!("wrote {}", paths.summary_md.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Dataset { command } => match command {
            DatasetCommand::Validate { path } => cmd_dataset_validate(path).map(|()| false),
            DatasetCommand::Perturb(args) => cmd_perturb(args).map(|()| false),
        },
        Command::Run(args) => cmd_run(args),
        Command::Report(args) => cmd_report(args).map(|()| false),
    };
    match result {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(2),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
