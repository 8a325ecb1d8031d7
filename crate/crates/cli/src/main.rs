use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use epo_core::config::TrainConfig;
use epo_core::envs::Task;
use epo_core::run::{self, RunOptions};
use epo_core::trainer;

mod plot;
mod stats;
mod sweep;

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_PARTIAL: u8 = 3;

/// Failure classes mapped onto process exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
    Partial(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Partial(_) => EXIT_PARTIAL,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) | CliError::Partial(m) => m,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Config problems are usage errors; everything else is a runtime failure.
fn classify(e: epo_core::Error) -> CliError {
    match e {
        epo_core::Error::Config { .. } => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

#[derive(Parser)]
#[command(name = "epo", version, about = "Train and evaluate latent-gene agent populations on a shared actor-critic")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run into a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint with deterministic actions.
    Eval(EvalArgs),
    /// Run one training run per (axis value, seed) and aggregate.
    Sweep(SweepArgs),
    /// Draw learning curves from run directories.
    Plot(PlotArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from the newest checkpoint in --out.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    quiet: bool,
    /// Dotted-key overrides, e.g. population.K=1.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    all_genes: bool,
    /// Fail unless the checkpoint was trained on this task.
    #[arg(long)]
    task: Option<String>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// KEY=V1,V2,...
    #[arg(long)]
    pub axis: String,
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotFormat {
    Svg,
    Csv,
}

#[derive(Args)]
pub struct PlotArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, default_value = "master_mean_return")]
    pub metric: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = PlotFormat::Svg)]
    pub format: PlotFormat,
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig, CliError> {
    let base = match path {
        Some(p) if !p.exists() => return Err(CliError::Usage(format!("config file not found: {}", p.display()))),
        Some(p) => TrainConfig::from_path(p).map_err(|e| match e {
            epo_core::Error::Io(io) => CliError::Usage(format!("{}: {io}", p.display())),
            other => CliError::Usage(format!("{}: {other}", p.display())),
        })?,
        None => TrainConfig::default(),
    };
    let cfg = base.with_overrides(overrides).map_err(classify)?;
    cfg.validate().map_err(classify)?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref(), &args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.run.out_dir = Some(out.clone());
    }
    let Some(dir) = cfg.run.out_dir.clone() else {
        return Err(CliError::Usage("no output directory: pass --out or set run.out_dir".into()));
    };
    std::fs::create_dir_all(&dir).map_err(runtime)?;
    let quiet = args.quiet;
    let mut progress = |m: &epo_core::metrics::MetricsRow| {
        if !quiet && m.iteration % 10 == 0 {
            eprintln!(
                "iter {:>6}  steps {:>9}  master {:>10.3}  lr {:.2e}  kl {:+.4}{}",
                m.iteration,
                m.env_steps,
                m.master_mean_return,
                m.lr,
                m.approx_kl,
                if m.evolved { "  evolved" } else { "" }
            );
        }
    };
    let opts = RunOptions { resume: args.resume, on_iteration: Some(&mut progress) };
    let outcome = run::train_run(&cfg, &dir, opts).map_err(|e| {
        CliError::Runtime(format!("training failed: {e} (diagnostics in {})", dir.display()))
    })?;
    if !quiet {
        if let Some(eval) = &outcome.manifest.final_eval {
            eprintln!("final master eval: mean return {:.4}", eval.master().mean_return);
        }
    }
    println!("{}", dir.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    if args.episodes == 0 {
        return Err(CliError::Usage("--episodes must be at least 1".into()));
    }
    let task = match &args.task {
        Some(t) => Some(t.parse::<Task>().map_err(|e| CliError::Usage(e.to_string()))?),
        None => None,
    };
    if !args.checkpoint.exists() {
        return Err(CliError::Usage(format!("checkpoint not found: {}", args.checkpoint.display())));
    }
    let report = trainer::evaluate_checkpoint(&args.checkpoint, task, args.episodes, args.seed, args.all_genes)
        .map_err(classify)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(runtime)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => sweep::cmd_sweep(a),
        Command::Plot(a) => plot::cmd_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
