//! `bitctx`: train, evaluate, count and analyze 1-bit networks.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 for
//! runtime failures (missing data, corrupt or mismatched checkpoints).

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use bitctx_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "bitctx", version, about = "1-bit contextual networks: training, evaluation, cost accounting")]
struct Cli {
    /// Seed for every random draw (ChaCha8). Overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one phase (step 1, step 2 or dynamic fine-tuning).
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split of a dataset.
    Eval(EvalArgs),
    /// Per-layer BOPs/FLOPs/OPs of a network.
    CountOps(CountArgs),
    /// Binarization error of every MLP branch of a checkpoint.
    AnalyzeBinerr(BinerrArgs),
    /// Replace 3x3 convs by MLP blocks and tabulate cost (and accuracy).
    Sweep(SweepArgs),
    /// Write a preset as a TOML spec.
    ExportSpec(ExportArgs),
}

#[derive(Args, Debug)]
struct ModelArg {
    /// Built-in architecture.
    #[arg(long, default_value = "desk-tiny", conflicts_with = "spec")]
    preset: String,
    /// TOML network spec.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Checkpoint to write.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset id (`synthetic:<n>[:<seed>]` or a directory).
    #[arg(long, default_value = "synthetic:5000")]
    dataset: String,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Table,
    Csv,
    Tsv,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    /// Operations per multiply-accumulate.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..=2))]
    mac_factor: u64,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Xnor,
    Literal,
}

#[derive(Args, Debug)]
struct BinerrArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "xnor")]
    mode: Mode,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Metric {
    Ops,
    ConvFcOps,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, default_value = "desk-tiny-conv", conflicts_with = "spec")]
    preset: String,
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Numbers of replaced convs.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    points: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    mlp_per_conv: usize,
    /// Allowed relative OPs change between consecutive points.
    #[arg(long, default_value_t = 0.03)]
    band: f64,
    #[arg(long, value_enum, default_value = "conv-fc-ops")]
    metric: Metric,
    /// Iterations per training step; 0 only counts operations.
    #[arg(long, default_value_t = 0)]
    train_iterations: u64,
    #[arg(long, default_value = "synthetic:5000")]
    dataset: String,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long, default_value = "desk-tiny")]
    preset: String,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) | Error::Spec(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            eprintln!("{}", text.lines().next().unwrap_or("usage error"));
            return ExitCode::from(1);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
