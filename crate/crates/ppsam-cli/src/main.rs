//! `ppsam` — fine-tune box-promptable segmenters with perturbed prompts
//! and benchmark their robustness to sloppy boxes.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3
//! runtime/training failure.

mod commands;
mod config;
mod index;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use ppsam_core::error::{SegmenterError, SweepError, TrainError};
use ppsam_core::sweep::ExperimentKind;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{message}")]
    Config { message: String },
    #[error("{message}")]
    Data { message: String },
    #[error("{message}")]
    Runtime { message: String },
}

impl CliError {
    fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Runtime {
            message: format!("{}: {e}", path.display()),
        }
    }

    fn from_train(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig { .. } | TrainError::AllFrozen => CliError::Config {
                message: e.to_string(),
            },
            TrainError::Data(inner) => CliError::Data {
                message: inner.to_string(),
            },
            other => CliError::Runtime {
                message: other.to_string(),
            },
        }
    }

    fn from_sweep(e: SweepError) -> Self {
        match e {
            SweepError::UnknownKind(_) => CliError::Config {
                message: e.to_string(),
            },
            SweepError::Data(inner) => CliError::Data {
                message: inner.to_string(),
            },
            SweepError::EmptyTestSet(_) => CliError::Data {
                message: e.to_string(),
            },
            SweepError::Segmenter(SegmenterError::MissingCheckpoint) => CliError::Config {
                message: "foundation backend requires a checkpoint path".into(),
            },
            other => CliError::Runtime {
                message: other.to_string(),
            },
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } => 1,
            CliError::Data { .. } => 2,
            CliError::Runtime { .. } => 3,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "ppsam",
    about = "Prompt-perturbation fine-tuning and robustness sweeps for box-promptable segmenters",
    version
)]
struct Cli {
    /// Output root for experiments, logs, curves and reports.
    #[arg(long, global = true, env = "PPSAM_OUT", default_value = "ppsam-out")]
    out: PathBuf,
    /// Dataset root containing `<name>/images` and `<name>/masks`.
    #[arg(long, global = true, env = "PPSAM_DATA", default_value = "data")]
    data: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract tight bounding boxes from every ground-truth mask.
    ExtractBbox {
        /// Dataset name under the data root.
        #[arg(long)]
        dataset: String,
    },
    /// Draw a k-shot sample and write it as a JSON-lines manifest.
    SampleFewshot {
        #[arg(long)]
        dataset: String,
        /// Shot count: 1, 5, 10, 20, 50, 100 or `full`.
        #[arg(long)]
        k: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional split file; samples come from its train side.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Output manifest path.
        #[arg(long)]
        manifest_out: PathBuf,
    },
    /// Fine-tune a segmenter according to a config file.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Re-run even if an identical experiment already completed.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate robustness curves (optionally a whole experiment grid).
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Combine stored curves into a CSV, an SVG plot, and reference
    /// annotations.
    Report {
        /// Comma-separated experiment ids.
        #[arg(long, value_delimiter = ',', required = true)]
        experiments: Vec<String>,
        /// Report kind: freeze-ablation, train-perturbation-ablation,
        /// fewshot-curve, generalization, scale-comparison or
        /// sota-comparison.
        #[arg(long)]
        kind: String,
    },
    /// Generate a synthetic shapes dataset for CPU-scale experiments.
    Synth {
        #[arg(long)]
        name: String,
        #[arg(long, default_value_t = 250)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: u32,
        #[arg(long, default_value_t = 1)]
        distractors: usize,
        #[arg(long, default_value_t = 24)]
        noise: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// When nonzero, also write `<name>.split.json` holding out this
        /// many samples as the test side.
        #[arg(long, default_value_t = 0)]
        test_count: usize,
    },
    /// Print the fingerprint of a config file.
    Fingerprint {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    commands::ensure_out_dir(&cli.out)?;
    match cli.command {
        Command::ExtractBbox { dataset } => {
            let out_dir = cli.out.join("bbox");
            commands::extract_bbox(&cli.data, &dataset, &out_dir)
        }
        Command::SampleFewshot {
            dataset,
            k,
            seed,
            split,
            manifest_out,
        } => commands::sample_fewshot_cmd(
            &cli.data,
            &dataset,
            &k,
            seed,
            split.as_deref(),
            &manifest_out,
        ),
        Command::Finetune { config, force } => {
            commands::finetune_cmd(&config, &cli.data, &cli.out, force).map(|_| ())
        }
        Command::Sweep { config, force } => {
            commands::sweep_cmd(&config, &cli.data, &cli.out, force).map(|_| ())
        }
        Command::Report { experiments, kind } => {
            let kind: ExperimentKind = kind.parse().map_err(|e: SweepError| CliError::Config {
                message: e.to_string(),
            })?;
            commands::report_cmd(&experiments, kind, &cli.out)
        }
        Command::Synth {
            name,
            count,
            size,
            distractors,
            noise,
            seed,
            test_count,
        } => commands::synth_cmd(
            &cli.data,
            &name,
            count,
            size,
            distractors,
            noise,
            seed,
            test_count,
        ),
        Command::Fingerprint { config } => commands::fingerprint_cmd(&config).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are success; everything else is
            // a usage error (exit 1).
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
