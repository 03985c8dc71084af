//! `protoshift` command line: generate synthetic benchmarks, train,
//! evaluate, sweep the mixing weight and run ablations.

mod config;
mod grid;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::info;
use protoshift::synth::{self, Benchmark, SynthConfig};
use protoshift::trainer::{
    evaluate, run_ablation, sweep_lambda, train, write_log_file, write_table, AblationKind, EvalReport, Experiment,
};
use protoshift::{ConceptGraph, FeatureDataset, GpnModel, ShiftSetting};
use serde_json::json;

use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] protoshift::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Core(_) | CliError::Io { .. } => 1,
        }
    }

    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Parser)]
#[command(name = "protoshift", version, about = "Few-shot classification with graph-mixed prototypes")]
struct Cli {
    /// More log output on stderr (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic benchmark directory.
    Synth(SynthArgs),
    /// Train a model and write its checkpoint and log.
    Train(RunArgs),
    /// Evaluate a checkpoint on test episodes; prints a JSON report.
    Eval(EvalArgs),
    /// Train and evaluate once per lambda; writes `param,mean,ci95`.
    Sweep(SweepArgs),
    /// Train and evaluate ablated models; writes `param,mean,ci95`.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// easy-shift or hard-shift.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// JSON generator configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Overrides {
    /// Run configuration (JSON). Flags below take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Benchmark directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// tgt, src+tgt or fulltgt.
    #[arg(long)]
    setting: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Evaluation threads; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Benchmark directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    #[arg(long, default_value_t = protoshift::episodes::DEFAULT_QUERIES)]
    n_query: usize,
    #[arg(long, default_value_t = protoshift::trainer::DEFAULT_TEST_EPISODES)]
    episodes: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Also write per-episode accuracies here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Comma-separated lambdas; `a,b,...,c` steps from a by b - a up to c.
    #[arg(long, default_value = "0,0.1,...,1")]
    grid: String,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// rand, fc, or a comma-separated list of both.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let mut cfg = match (&args.preset, &args.config) {
        (Some(name), None) => SynthConfig::preset(name).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown preset {name:?} (expected one of {})",
                SynthConfig::preset_names().join(", ")
            ))
        })?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("invalid synth config: {e}")))?
        }
        _ => return Err(CliError::Usage("pass exactly one of --preset or --config".into())),
    };
    if let Some(seed) = args.seed.map_or_else(config::env_seed, |s| Ok(Some(s)))? {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let bench = Benchmark::generate(&cfg)?;
    fs::create_dir_all(&args.out).map_err(CliError::io(&args.out))?;
    let manifest = bench.write(&args.out)?;
    info!("wrote {}", manifest.display());
    Ok(())
}

/// Loads the config file (if any), applies flag overrides and validates.
fn resolve_config(o: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = match &o.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &o.data {
        cfg.data = d.clone();
    }
    if let Some(d) = &o.output {
        cfg.output = d.clone();
    }
    if let Some(l) = o.lambda {
        cfg.model.lambda = l;
    }
    if let Some(s) = &o.setting {
        cfg.train.setting = s.parse::<ShiftSetting>().map_err(CliError::Usage)?;
    }
    if let Some(n) = o.iterations {
        cfg.train.iterations = n;
    }
    if let Some(n) = o.n_way {
        cfg.train.n_way = n;
        cfg.eval.n_way = n;
    }
    if let Some(k) = o.k_shot {
        cfg.train.k_shot = k;
        cfg.eval.k_shot = k;
    }
    if let Some(e) = o.episodes {
        cfg.eval.episodes = e;
    }
    if let Some(w) = o.workers {
        cfg.eval.workers = w;
    }
    cfg.apply_seed(o.seed)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> Result<(FeatureDataset, Arc<ConceptGraph>), CliError> {
    let data = FeatureDataset::load(&cfg.manifest_path())?;
    let graph = synth::load_graph(&cfg.edges_path(), &cfg.vectors_path())?;
    Ok((data, Arc::new(graph)))
}

fn experiment<'a>(cfg: &RunConfig, data: &'a FeatureDataset, graph: Arc<ConceptGraph>) -> Experiment<'a> {
    Experiment {
        data,
        graph,
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        eval: cfg.eval,
    }
}

fn cmd_train(args: RunArgs) -> Result<(), CliError> {
    let cfg = resolve_config(&args.overrides)?;
    let (data, graph) = load_data(&cfg)?;
    let exp = experiment(&cfg, &data, graph);
    info!(
        "training {} iterations, lambda {}, setting {}",
        cfg.train.iterations, cfg.model.lambda, cfg.train.setting
    );
    let outcome = train(exp.build_model()?, &data, &cfg.train)?;
    fs::create_dir_all(&cfg.output).map_err(CliError::io(&cfg.output))?;
    let ckpt = cfg.output.join("model.ckpt");
    outcome.model.save(&ckpt)?;
    write_log_file(&outcome.log, &cfg.output.join("train_log.jsonl"))?;
    let summary = json!({
        "iterations": cfg.train.iterations,
        "best_iter": outcome.best_iter,
        "best_val": outcome.best_val,
        "final_loss": outcome.log.last().map(|e| e.loss),
    });
    println!("{summary}");
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    if args.workers == 0 || args.episodes == 0 {
        return Err(CliError::Usage("--workers and --episodes must be positive".into()));
    }
    let seed = match args.seed {
        Some(s) => s,
        None => config::env_seed()?.unwrap_or(0),
    };
    let cfg = RunConfig {
        data: args.data.clone(),
        ..RunConfig::default()
    };
    let (data, graph) = load_data(&cfg)?;
    let model = GpnModel::load(&args.checkpoint, graph, data.class_names())?;
    let eval = protoshift::trainer::EvalConfig {
        n_way: args.n_way,
        k_shot: args.k_shot,
        n_query: args.n_query,
        episodes: args.episodes,
        seed,
        workers: args.workers,
    };
    let report = evaluate(&model, &data, &eval.spec(), eval.episodes, eval.seed, Some(eval.workers))?;
    if let Some(path) = &args.csv {
        let mut buf = Vec::new();
        report.write_csv(&mut buf).map_err(CliError::io(path))?;
        fs::write(path, buf).map_err(CliError::io(path))?;
    }
    println!("{}", report.to_json());
    Ok(())
}

fn emit_table(rows: &[(String, EvalReport)], out: Option<&Path>) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write_table(rows, &mut buf).expect("in-memory write");
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(CliError::io(dir))?;
            }
            fs::write(path, buf).map_err(CliError::io(path))
        }
        None => std::io::stdout()
            .write_all(&buf)
            .map_err(CliError::io(Path::new("<stdout>"))),
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let grid = grid::parse_grid(&args.grid).map_err(CliError::Usage)?;
    let cfg = resolve_config(&args.overrides)?;
    let (data, graph) = load_data(&cfg)?;
    let exp = experiment(&cfg, &data, graph);
    let rows: Vec<(String, EvalReport)> = sweep_lambda(&exp, &grid)?
        .into_iter()
        .map(|(l, r)| (l.to_string(), r))
        .collect();
    emit_table(&rows, args.out.as_deref())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    let kinds = args
        .kind
        .split(',')
        .map(|k| k.trim().parse::<AblationKind>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::Usage)?;
    let cfg = resolve_config(&args.overrides)?;
    let (data, graph) = load_data(&cfg)?;
    let exp = experiment(&cfg, &data, graph);
    let mut rows = Vec::with_capacity(kinds.len());
    for kind in kinds {
        info!("ablation {kind}");
        rows.push((kind.to_string(), run_ablation(&exp, kind)?.report));
    }
    emit_table(&rows, args.out.as_deref())
}
