mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Default output root when `--out` is not given.
pub const OUT_ENV: &str = "FLATFORMER_OUT";

#[derive(Parser, Debug)]
#[command(name = "flatformer", version, about = "Session-aware flat Transformer for knowledge tracing")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory [default: $FLATFORMER_OUT/<command> or runs/<command>].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Override any configuration value, e.g. --set train.lr=5e-4.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    /// backbone, no_session, no_forgetting or full.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic log with known session and forgetting dynamics.
    Synth {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Parse, clean, sessionize, split and window a raw log.
    Derive {
        /// Delimited interaction log.
        #[arg(long)]
        input: PathBuf,
        /// JSON column mapping [default: the synthetic log layout].
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Session gap in hours.
        #[arg(long)]
        gap_hours: Option<f64>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Train one variant for every configured seed.
    Train {
        /// Directory written by `derive`.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// train, validation or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Also measure inference latency.
        #[arg(long)]
        bench: bool,
    },
    /// Train all four variants for every seed and tabulate them.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Train the full variant for every configured beta and seed.
    SweepBeta {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Dump per-layer, per-head attention weights for one sequence.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Student id [default: first window with a session boundary].
        #[arg(long)]
        student: Option<String>,
    },
    /// Inference latency of every variant on a fixed synthetic batch.
    Bench {
        #[command(flatten)]
        model: ModelFlags,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = cli.common;
    let result = match cli.command {
        Command::Synth { seed } => commands::synth(&common, seed),
        Command::Derive { input, schema, gap_hours, max_len } => commands::derive(&common, &input, schema.as_deref(), gap_hours, max_len),
        Command::Train { data, model } => commands::train(&common, &data, &model),
        Command::Eval { checkpoint, data, split, bench } => commands::eval(&common, &checkpoint, &data, &split, bench),
        Command::Ablate { data, seed, beta, max_len } => commands::ablate(
            &common,
            &data,
            &ModelFlags { seed, beta, max_len, variant: None },
        ),
        Command::SweepBeta { data, seed, max_len } => commands::sweep_beta(
            &common,
            &data,
            &ModelFlags { seed, max_len, ..ModelFlags::default() },
        ),
        Command::ExportAttention { checkpoint, data, split, student } => {
            commands::export_attention(&common, &checkpoint, &data, &split, student.as_deref())
        }
        Command::Bench { model } => commands::bench(&common, &model),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flatformer: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
