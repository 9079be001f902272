//! Command-line pipeline for token-level spelling normalization
//! experiments: corpus statistics, BPE learning, training, decoding,
//! hybrid normalization, evaluation, resplit experiments, and BPE-size
//! sweeps.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "histnorm", version, about = "Neural historical spelling normalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus statistics for a train/dev/test TSV triple.
    Stats {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Language tag for the report.
        #[arg(long, default_value = "corpus")]
        lang: String,
    },
    /// Learn a BPE merge list from the training corpus (both sides).
    BpeLearn {
        /// Training TSV.
        #[arg(long)]
        input: PathBuf,
        /// Total symbol budget (characters + merges).
        #[arg(long)]
        vocab_size: usize,
        /// Merge list destination.
        #[arg(long)]
        output: PathBuf,
        /// Also write the derived vocabulary here.
        #[arg(long)]
        vocab_out: Option<PathBuf>,
    },
    /// Train a model described by a config file.
    Train {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Override the preset.
        #[arg(long)]
        preset: Option<String>,
        /// Override the BPE budget (0 = character level).
        #[arg(long)]
        bpe_size: Option<usize>,
        /// Override the seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Override the update cap.
        #[arg(long)]
        max_updates: Option<u64>,
    },
    /// Normalize tokens (one per line) with a trained checkpoint.
    Normalize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input tokens, one per line.
        #[arg(long)]
        input: PathBuf,
        /// Predictions destination, line-aligned with the input.
        #[arg(long)]
        output: PathBuf,
        /// neural | hybrid
        #[arg(long, default_value = "neural")]
        mode: String,
        /// Training TSV to build the unchanged-spelling lexicon from
        /// (required for hybrid mode).
        #[arg(long)]
        lexicon_from: Option<PathBuf>,
        /// any_unchanged | majority
        #[arg(long, default_value = "majority")]
        lexicon_policy: String,
        /// Case-fold lexicon lookup (ablation).
        #[arg(long)]
        case_fold: bool,
        #[arg(long, default_value_t = 5)]
        beam_size: usize,
        /// Length-normalization exponent (0 = raw scores).
        #[arg(long, default_value_t = 0.0)]
        length_norm: f64,
    },
    /// Score a predictions file against a test TSV.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Second predictions file; prints the accuracy delta
        /// (predictions minus compare).
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Move a prefix of the test set into train/dev and write new TSVs.
    Resplit {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        move_to_train: usize,
        #[arg(long)]
        move_to_dev: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train and evaluate one model family across BPE vocabulary sizes.
    Sweep {
        /// Experiment config (TOML); the preset picks the family.
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated sizes; 0 is the character-level model.
        #[arg(long, value_delimiter = ',', default_values_t = [0usize, 100, 200, 300, 500, 1000, 5000])]
        sizes: Vec<usize>,
        /// Override the output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

/// Failures that are the caller's fault (bad flags, bad config, unreadable
/// or malformed inputs) exit 2; runtime failures exit 1.
#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    fn report(self) -> ExitCode {
        match self {
            CliError::Usage(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(2)
            }
            CliError::Runtime(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        }
    }
}

pub(crate) fn usage(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Usage(e.into())
}

pub(crate) fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Stats { train, dev, test, lang } => commands::stats(&train, &dev, &test, &lang),
        Command::BpeLearn { input, vocab_size, output, vocab_out } => {
            commands::bpe_learn(&input, vocab_size, &output, vocab_out.as_deref())
        }
        Command::Train { config, preset, bpe_size, seed, out_dir, max_updates } => {
            let mut cfg = ExperimentConfig::load(&config).map_err(usage)?;
            if let Some(p) = preset {
                cfg.experiment.preset = p;
            }
            if let Some(b) = bpe_size {
                cfg.experiment.bpe_size = b;
            }
            if let Some(s) = seed {
                cfg.experiment.seed = s;
            }
            if let Some(d) = out_dir {
                cfg.paths.out_dir = Some(d);
            }
            if let Some(m) = max_updates {
                cfg.train.max_updates = Some(m);
            }
            commands::train(&cfg).map(|_| ())
        }
        Command::Normalize {
            checkpoint,
            input,
            output,
            mode,
            lexicon_from,
            lexicon_policy,
            case_fold,
            beam_size,
            length_norm,
        } => commands::normalize(
            &checkpoint,
            &input,
            &output,
            &mode,
            lexicon_from.as_deref(),
            &lexicon_policy,
            case_fold,
            beam_size,
            length_norm,
        ),
        Command::Evaluate { predictions, test, compare } => {
            commands::evaluate(&predictions, &test, compare.as_deref())
        }
        Command::Resplit { train, dev, test, move_to_train, move_to_dev, out_dir } => {
            commands::resplit(&train, &dev, &test, move_to_train, move_to_dev, &out_dir)
        }
        Command::Sweep { config, sizes, out_dir } => {
            let mut cfg = ExperimentConfig::load(&config).map_err(usage)?;
            if let Some(d) = out_dir {
                cfg.paths.out_dir = Some(d);
            }
            commands::sweep(&cfg, &sizes)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}
