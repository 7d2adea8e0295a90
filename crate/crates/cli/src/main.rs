//! `setvqa` command-line front end.
//!
//! Exit status: 0 ok, 1 unclassified, 2 usage, 3 missing file, 4 schema,
//! 5 vocabulary mismatch, 6 invalid config, 7 gradient check failed,
//! 8 diverged, 9 unsupported. Failures print one JSON line to stderr.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use setvqa::training::Mode;

use crate::commands::{AnalyzeRun, EvalRun, GenRun, GradcheckRun, TrainRunConfig};
use crate::config::Layers;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "setvqa", version, about = "Synthetic multi-image VQA workbench")]
struct Cli {
    /// Worker threads for training and evaluation. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Log progress (RUST_LOG takes precedence).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML or JSON run config; `<command>.config.json` from an earlier run works.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set config.bias_skew=0.75`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Output directory (overrides SETVQA_OUT_DIR and the config file).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (and optionally a pre-training set).
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        bias_skew: Option<f64>,
        #[arg(long)]
        feature_dim: Option<usize>,
        /// Dataset file, relative to the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        pretrain_out: Option<PathBuf>,
        #[arg(long)]
        pretrain_samples: Option<usize>,
        #[arg(long)]
        embed_features: bool,
    },
    /// Train a model; writes a checkpoint and a manifest.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pre-training set for two-phase training.
        #[arg(long)]
        pretrain_data: Option<PathBuf>,
        #[arg(long)]
        pretrain_epochs: Option<usize>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Remove every visual feature: language-only evaluation.
        #[arg(long)]
        scrub_visual: bool,
    },
    /// Question and answer distribution audit of a dataset or annotation file.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "annotations")]
        data: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        question_field: Option<String>,
        #[arg(long)]
        answers_field: Option<String>,
        #[arg(long)]
        id_field: Option<String>,
    },
    /// Finite-difference gradient check of the full model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Mode to check; repeatable. Defaults to every mode.
        #[arg(long = "mode", value_parser = parse_mode)]
        modes: Vec<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        tolerance: Option<f64>,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::ALL
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| format!("expected one of {}", Mode::ALL.map(|m| m.as_str()).join(", ")))
}

fn layers(common: &Common) -> CliResult<Layers> {
    let mut l = Layers::new(common.config.as_deref())?;
    l.set_all(&common.sets)?;
    l.flag("out_dir", common.out_dir.as_ref())?;
    Ok(l)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen { common, seed, samples, bias_skew, feature_dim, out, pretrain_out, pretrain_samples, embed_features } => {
            let mut l = layers(&common)?;
            l.flag("config.seed", seed)?;
            l.flag("config.num_samples", samples)?;
            l.flag("config.bias_skew", bias_skew)?;
            l.flag("config.feature_dim", feature_dim)?;
            l.flag("out", out)?;
            l.flag("pretrain_out", pretrain_out)?;
            l.flag("pretrain_samples", pretrain_samples)?;
            l.flag("embed_features", embed_features.then_some(true))?;
            let source = l.source.clone();
            commands::gen(&l.resolve::<GenRun>()?, source.as_deref())
        }
        Command::Train { common, data, pretrain_data, pretrain_epochs, mode, epochs, seed, learning_rate } => {
            let mut l = layers(&common)?;
            l.flag("data", data)?;
            l.flag("config.pretrain_dataset", pretrain_data)?;
            l.flag("config.pretrain_epochs", pretrain_epochs)?;
            l.flag("config.mode", mode)?;
            l.flag("config.epochs", epochs)?;
            l.flag("config.seed", seed)?;
            l.flag("config.learning_rate", learning_rate)?;
            let source = l.source.clone();
            commands::train_cmd(&l.resolve::<TrainRunConfig>()?, source.as_deref())
        }
        Command::Eval { common, checkpoint, data, scrub_visual } => {
            let mut l = layers(&common)?;
            l.flag("checkpoint", checkpoint)?;
            l.flag("data", data)?;
            l.flag("scrub_visual", scrub_visual.then_some(true))?;
            let source = l.source.clone();
            commands::eval(&l.resolve::<EvalRun>()?, source.as_deref())
        }
        Command::Analyze { common, data, annotations, question_field, answers_field, id_field } => {
            let mut l = layers(&common)?;
            l.flag("data", data)?;
            l.flag("annotations", annotations)?;
            l.flag("fields.question", question_field)?;
            l.flag("fields.answers", answers_field)?;
            l.flag("fields.id", id_field)?;
            let source = l.source.clone();
            commands::analyze(&l.resolve::<AnalyzeRun>()?, source.as_deref())
        }
        Command::Gradcheck { common, modes, seed, tolerance } => {
            let mut l = layers(&common)?;
            l.flag("modes", (!modes.is_empty()).then_some(modes))?;
            l.flag("setup.seed", seed)?;
            l.flag("setup.tolerance", tolerance)?;
            let source = l.source.clone();
            commands::gradcheck(&l.resolve::<GradcheckRun>()?, source.as_deref())
        }
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", e.line());
    ExitCode::from(e.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return fail(&CliError::Usage(first.to_string()));
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.threads == 0 {
        return fail(&CliError::Usage("--threads must be at least 1".into()));
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        return fail(&CliError::Usage(format!("thread pool: {e}")));
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
