//! Command-line entry point: data generation, rule distillation, training,
//! evaluation, sweeps and the composition demo, all driven by one flat
//! config (file keys overridable by flags) and a single root seed.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{CliError, EvalArgs};
use config::Settings;

#[derive(Parser)]
#[command(name = "refground", version, about = "Neuro-symbolic referring-expression grounding on synthetic 3D scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat key=value config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed; all randomness derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (created if absent).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Detector noise level in [0, 1).
    #[arg(long, global = true)]
    noise_level: Option<f64>,

    /// Fraction of train queries to keep, in (0, 1].
    #[arg(long, global = true)]
    data_fraction: Option<f64>,

    /// Regularizer weights as `alpha,beta,gamma`.
    #[arg(long, global = true)]
    weights: Option<String>,

    /// Comma-separated concepts to hold out of training.
    #[arg(long, global = true)]
    holdout: Option<String>,

    /// Also hold negated relations out of training.
    #[arg(long, global = true)]
    holdout_negated: bool,

    /// Completion backend: fixture, replay or remote.
    #[arg(long, global = true)]
    backend: Option<String>,

    /// Worker threads for batch gradients and evaluation (0 = default).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Extra `key=value` overrides for any config key.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct DataRef {
    /// Directory produced by `gen-data`.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes and query splits, validated against the oracle.
    GenData,
    /// Distill concept rules through the configured backend.
    Distill {
        /// Extract the vocabulary from this dataset instead of the config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train on a generated dataset and write checkpoint plus metrics.
    Train {
        #[command(flatten)]
        data: DataRef,
        /// Rule file from `distill` (defaults to the shipped fixture).
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[command(flatten)]
        data: DataRef,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rules: Option<PathBuf>,
        /// eval, train, zero-shot or transfer.
        #[arg(long, default_value = "eval")]
        split: String,
        /// Add freshly initialized embeddings for missing concepts instead
        /// of rejecting the checkpoint.
        #[arg(long)]
        extend_vocab: bool,
        /// Dump per-concept relation matrices as numeric grids.
        #[arg(long)]
        emit_matrices: bool,
        /// Write step-by-step execution traces for the first queries.
        #[arg(long)]
        dump_trace: bool,
    },
    /// Train and evaluate across a data-fraction or noise axis.
    Sweep {
        /// `data` or `noise`.
        #[arg(long)]
        kind: String,
        /// Comma-separated, strictly increasing axis values.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Compose `center` from oracle left/right matrices on a demo scene.
    ComposeDemo,
}

fn apply_global_overrides(settings: &mut Settings, cli: &Cli) -> Result<(), CliError> {
    if let Some(seed) = cli.seed {
        settings.seed = seed;
    }
    if let Some(level) = cli.noise_level {
        settings.noise_level = level;
    }
    if let Some(fraction) = cli.data_fraction {
        settings.data_fraction = fraction;
    }
    if let Some(weights) = &cli.weights {
        settings.set_weights(weights)?;
    }
    if let Some(holdout) = &cli.holdout {
        settings.holdout = holdout.clone();
    }
    if cli.holdout_negated {
        settings.holdout_negated = true;
    }
    if let Some(backend) = &cli.backend {
        settings.backend = backend.clone();
    }
    if let Some(workers) = cli.workers {
        settings.workers = workers;
    }
    for kv in &cli.sets {
        let (key, value) = kv.split_once('=').ok_or_else(|| {
            CliError::Config(format!("--set expects KEY=VALUE, got `{kv}`"))
        })?;
        settings.set(key.trim(), value.trim()).map_err(CliError::from)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut settings = Settings::load(cli.config.as_deref())?;
    apply_global_overrides(&mut settings, cli)?;
    if settings.workers > 0 {
        // Worker count never changes results; gradients reduce in batch order.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(settings.workers)
            .build_global();
    }
    match &cli.command {
        Command::GenData => commands::gen_data(&settings, &cli.out),
        Command::Distill { data } => commands::distill(&settings, &cli.out, data.as_deref()),
        Command::Train { data, rules } => {
            commands::train(&settings, &cli.out, &data.data, rules.as_deref())
        }
        Command::Eval { data, checkpoint, rules, split, extend_vocab, emit_matrices, dump_trace } => {
            commands::eval_cmd(
                &settings,
                &cli.out,
                &EvalArgs {
                    data_dir: &data.data,
                    checkpoint,
                    rules_file: rules.as_deref(),
                    split: split.clone(),
                    extend_vocab: *extend_vocab,
                    emit_matrices: *emit_matrices,
                    dump_trace: *dump_trace,
                },
            )
        }
        Command::Sweep { kind, axis, rules } => {
            commands::sweep(&settings, &cli.out, kind, axis, rules.as_deref())
        }
        Command::ComposeDemo => commands::compose_demo(&settings),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({
                "error": e.message(),
                "exit_code": e.exit_code(),
            });
            eprintln!("{record}");
            ExitCode::from(e.exit_code())
        }
    }
}
