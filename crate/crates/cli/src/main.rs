//! `mpresnet` command-line interface.

mod commands;
mod outputs;
mod palette;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mpresnet::data::SplitRatio;
use mpresnet::models::Variant;

use crate::outputs::Outputs;

#[derive(Debug, Parser)]
#[command(name = "mpresnet", version, about = "MP-ResNet PolSAR segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic speckled dataset.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
        /// Tile side in pixels (multiple of 32).
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 4.0)]
        looks: f64,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a fold manifest of independent train/validation splits.
    Split {
        #[arg(long)]
        items: usize,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long, default_value = "9:1")]
        ratio: SplitRatio,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on one fold.
    Train {
        /// Flat TOML with model and training keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        data: PathBuf,
        /// Fold manifest; without one the fold is drawn from the config seed.
        #[arg(long)]
        folds: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on dataset items.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated ids or ranges, e.g. `0,3,10-19`; default all.
        #[arg(long)]
        ids: Option<String>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = mpresnet::data::DEFAULT_CLIP_QUANTILE)]
        clip_quantile: f64,
    },
    /// Render the predicted map of one tile as a binary PPM.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tile: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = mpresnet::data::DEFAULT_CLIP_QUANTILE)]
        clip_quantile: f64,
    },
    /// Static parameter, FLOP and receptive-field report.
    Analyze {
        #[arg(long, default_value = "mp_resnet")]
        arch: Variant,
        /// Model config overriding the reference architecture.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `CxHxW`.
        #[arg(long, default_value = "4x512x512")]
        input: String,
        /// FLOPs per multiply-accumulate; default is the calibrated factor.
        #[arg(long)]
        mac_factor: Option<u8>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train both architectures on every fold and compare them.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        folds: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli, out: &mut Outputs) -> mpresnet::Result<()> {
    match cli.command {
        Command::Synth {
            seed,
            count,
            size,
            looks,
            classes,
            out: dir,
        } => commands::synth(out, seed, count, size, looks, classes, &dir),
        Command::Split {
            items,
            folds,
            ratio,
            seed,
            out: path,
        } => commands::split(out, items, folds, ratio, seed, &path),
        Command::Train {
            config,
            fold,
            data,
            folds,
            out: dir,
        } => commands::train(out, config.as_deref(), fold, &data, folds.as_deref(), &dir),
        Command::Eval {
            checkpoint,
            data,
            ids,
            report,
            clip_quantile,
        } => commands::eval(out, &checkpoint, &data, ids.as_deref(), report.as_deref(), clip_quantile),
        Command::Predict {
            checkpoint,
            tile,
            out: path,
            clip_quantile,
        } => commands::predict(out, &checkpoint, &tile, &path, clip_quantile),
        Command::Analyze {
            arch,
            config,
            input,
            mac_factor,
            format,
            report,
        } => commands::analyze(out, arch, config.as_deref(), &input, mac_factor, format, report.as_deref()),
        Command::Ablate {
            data,
            folds,
            config,
            out: dir,
        } => commands::ablate(out, &data, &folds, config.as_deref(), &dir),
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error kind=usage msg={}", one_line(first));
            return ExitCode::from(2);
        }
    };
    let mut outputs = Outputs::default();
    match run(cli, &mut outputs) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            outputs.remove_all();
            eprintln!("error kind={} msg={}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
