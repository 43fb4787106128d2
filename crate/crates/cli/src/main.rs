//! Command-line front end: dataset generation, training, inductive and
//! transductive evaluation, attention export, gradient checking.
//!
//! Exit codes: 0 success, 2 validation failure, 3 numeric abort.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fewshot_core::config::RunConfig;
use fewshot_core::harness::{
    evaluate_checkpoint, export_attention_maps, metrics_jsonl, train, EvalParams, RunError,
};
use fewshot_core::model::load_checkpoint;
use fewshot_core::synth::{generate, Dataset, Split, SynthSpec};
use fewshot_core::transductive::TransduceOptions;
use fewshot_core::verify::{gradient_reachability, gradient_suite};

#[derive(Parser)]
#[command(name = "fewshot", about = "Few-shot classification with cross attention", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic glyph dataset.
    GenData(GenDataArgs),
    /// Train a model with episodic SGD.
    Train(TrainArgs),
    /// Evaluate a checkpoint (inductive by default).
    Eval(EvalArgs),
    /// Evaluate a checkpoint with transductive inference.
    TransduceEval(EvalArgs),
    /// Export attention maps of one episode as PGM + CSV.
    ExportAttn(ExportArgs),
    /// Check every gradient against central finite differences.
    GradCheck,
}

#[derive(Args)]
struct GenDataArgs {
    /// Dataset spec file (key = value); defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides on top of the spec file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config file (key = value, sections per module).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory from gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and training log.
    #[arg(long)]
    out: PathBuf,
    /// Config overrides as `section.key=value`; flags beat the file.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Where to write JSON-lines metrics; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    way: Option<usize>,
    #[arg(long)]
    shot: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run transductive inference (implied by transduce-eval).
    #[arg(long)]
    transductive: bool,
    #[arg(long)]
    t0: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    growth: Option<usize>,
    /// Evaluate even when the dataset hash differs from the checkpoint's.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    way: Option<usize>,
    #[arg(long)]
    shot: Option<usize>,
    #[arg(long, default_value_t = 1)]
    queries: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

#[derive(Debug)]
enum CliError {
    Run(RunError),
    Data(fewshot_core::error::DataError),
    Config(fewshot_core::error::ConfigError),
    Usage(String),
    GradCheck(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Run(e) => write!(f, "{e}"),
            CliError::Data(e) => write!(f, "{e}"),
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::GradCheck(msg) => write!(f, "gradient check failed:\n{msg}"),
        }
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        CliError::Run(e)
    }
}

impl From<fewshot_core::error::DataError> for CliError {
    fn from(e: fewshot_core::error::DataError) -> Self {
        CliError::Data(e)
    }
}

impl From<fewshot_core::error::ConfigError> for CliError {
    fn from(e: fewshot_core::error::ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Run(e) => e.exit_code(),
            CliError::GradCheck(_) => 3,
            _ => 2,
        }
    }
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    Split::parse(s).ok_or_else(|| CliError::Usage(format!("unknown split {s:?}")))
}

fn read_text(path: &PathBuf) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| {
        CliError::Data(fewshot_core::error::DataError::Io {
            path: path.display().to_string(),
            source: e,
        })
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(args) => {
            let mut spec = match &args.spec {
                Some(p) => SynthSpec::parse(&read_text(p)?, &p.display().to_string())?,
                None => SynthSpec::default(),
            };
            for kv in &args.set {
                let (key, value) = kv
                    .split_once('=')
                    .ok_or_else(|| CliError::Usage(format!("--set wants key=value, got {kv:?}")))?;
                spec.apply(key.trim(), value.trim()).map_err(CliError::Usage)?;
            }
            if let Some(seed) = args.seed {
                spec.seed = seed;
            }
            let hash = generate(&spec, &args.out).map_err(CliError::Data)?;
            println!("dataset written to {} (hash {hash})", args.out.display());
            Ok(())
        }
        Command::Train(args) => {
            let mut config = match &args.config {
                Some(p) => RunConfig::parse(&read_text(p)?, &p.display().to_string())?,
                None => RunConfig::default(),
            };
            for kv in &args.set {
                let usage = || CliError::Usage(format!("--set wants section.key=value, got {kv:?}"));
                let (path, value) = kv.split_once('=').ok_or_else(usage)?;
                let (section, key) = path.split_once('.').ok_or_else(usage)?;
                config
                    .apply(section.trim(), key.trim(), value.trim())
                    .map_err(CliError::Usage)?;
            }
            if let Some(seed) = args.seed {
                config.train.seed = seed;
            }
            if let Some(epochs) = args.epochs {
                config.train.epochs = epochs;
            }
            if let Some(ablation) = &args.ablation {
                config.model.ablation = fewshot_core::config::Ablation::parse(ablation)
                    .ok_or_else(|| CliError::Usage(format!("unknown ablation {ablation:?}")))?;
            }
            config.validate().map_err(CliError::Config)?;
            let dataset = Dataset::load(&args.data).map_err(CliError::Data)?;
            let outcome = train(&config, &dataset, &args.out)?;
            for stats in &outcome.epochs {
                println!(
                    "epoch {}: loss {:.4} (nn {:.2}, global {:.2}) val {:.4}",
                    stats.epoch, stats.total_loss, stats.nn_loss, stats.global_loss, stats.val_accuracy
                );
            }
            println!(
                "best val accuracy {:.4}; checkpoint at {}",
                outcome.best_val_accuracy,
                outcome.checkpoint_dir.display()
            );
            Ok(())
        }
        Command::Eval(args) => eval(args, false),
        Command::TransduceEval(args) => eval(args, true),
        Command::ExportAttn(args) => {
            let dataset = Dataset::load(&args.data).map_err(CliError::Data)?;
            let (model, meta) = load_checkpoint(&args.checkpoint).map_err(CliError::Data)?;
            let way = args.way.unwrap_or(meta.config.eval.way);
            let shot = args.shot.unwrap_or(meta.config.eval.shot);
            let written = export_attention_maps(
                &model,
                &dataset,
                parse_split(&args.split)?,
                way,
                shot,
                args.queries,
                args.seed,
                &args.out,
            )?;
            println!("wrote {} attention pairs to {}", written.len(), args.out.display());
            Ok(())
        }
        Command::GradCheck => {
            let checks = gradient_suite();
            let mut failed = Vec::new();
            for check in &checks {
                println!("{check}");
                if !check.passed() {
                    failed.push(check.label.clone());
                }
            }
            match gradient_reachability() {
                Ok(()) => println!("reachability: parameters gradient-reachable, constants clean ok"),
                Err(e) => failed.push(format!("reachability: {e}")),
            }
            if failed.is_empty() {
                println!("all {} gradient checks passed", checks.len() + 1);
                Ok(())
            } else {
                Err(CliError::GradCheck(failed.join("\n")))
            }
        }
    }
}

fn eval(args: EvalArgs, force_transductive: bool) -> Result<(), CliError> {
    let dataset = Dataset::load(&args.data).map_err(CliError::Data)?;
    let (_, meta) = load_checkpoint(&args.checkpoint).map_err(CliError::Data)?;
    let defaults = meta.config;
    let transductive = if force_transductive || args.transductive {
        Some(TransduceOptions {
            t0: args.t0.unwrap_or(defaults.transductive.t0),
            iters: args.iters.unwrap_or(defaults.transductive.iters),
            growth: args.growth.unwrap_or(defaults.transductive.growth),
        })
    } else {
        None
    };
    let params = EvalParams {
        split: parse_split(&args.split)?,
        way: args.way.unwrap_or(defaults.eval.way),
        shot: args.shot.unwrap_or(defaults.eval.shot),
        queries: args.queries.unwrap_or(defaults.eval.queries),
        episodes: args.episodes.unwrap_or(defaults.eval.episodes),
        seed: args.seed.unwrap_or(defaults.eval.seed),
        transductive,
    };
    let summary = evaluate_checkpoint(&args.checkpoint, &dataset, &params, args.force)?;
    let text = metrics_jsonl(&summary);
    match &args.out {
        Some(path) => fs::write(path, &text).map_err(|e| {
            CliError::Data(fewshot_core::error::DataError::Io {
                path: path.display().to_string(),
                source: e,
            })
        })?,
        None => print!("{text}"),
    }
    eprintln!(
        "{} episodes: accuracy {:.4} +/- {:.4} (95% CI)",
        summary.episodes, summary.mean_accuracy, summary.ci95
    );
    Ok(())
}
