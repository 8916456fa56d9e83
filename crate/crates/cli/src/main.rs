//! `interlock`: train, simulate, sweep, gradcheck, eval and summarize.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod failure;

/// Output directories given in configs and flags are resolved against this.
pub const OUTPUT_ROOT_ENV: &str = "INTERLOCK_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "interlock", version, about = "Component-partitioned training with interlocking backpropagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one run per seed and append a row per run to the results table.
    Train(TrainArgs),
    /// Simulate a pipeline schedule and check it against the closed form.
    Simulate(SimulateArgs),
    /// Train the cross product of strategies, depths and seeds.
    Sweep(SweepArgs),
    /// Compare routed gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Evaluate a checkpoint on the configured dataset.
    Eval(EvalArgs),
    /// Re-read a metrics or results file and print a summary table.
    Summarize(SummarizeArgs),
}

/// Config file plus overrides shared by the training commands.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// `key = value` config file; missing keys take their defaults.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set optim.kind=sgd`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shorthand for `model.arch`.
    #[arg(long)]
    pub arch: Option<String>,
    /// Shorthand for `routing.strategy`.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Shorthand for `train.steps`.
    #[arg(long)]
    pub steps: Option<String>,
    /// Shorthand for `train.epochs`.
    #[arg(long)]
    pub epochs: Option<String>,
    /// Shorthand for `train.seeds` (comma separated).
    #[arg(long)]
    pub seeds: Option<String>,
    /// Shorthand for `train.mode`: reference or pipelined.
    #[arg(long)]
    pub mode: Option<String>,
    /// Shorthand for `train.batch_size`.
    #[arg(long)]
    pub batch_size: Option<String>,
    /// Shorthand for a constant `lr.value`.
    #[arg(long)]
    pub lr: Option<String>,
    /// Shorthand for `output.dir`, relative to the output root.
    #[arg(short, long)]
    pub out: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Warm-start from a checkpoint (parameters and batch-norm statistics only).
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Accelerators (one component each).
    #[arg(short, long)]
    pub a: usize,
    /// Training steps.
    #[arg(short, long)]
    pub b: usize,
    #[arg(short, long, default_value = "e2e")]
    pub strategy: String,
    /// Replaces the N of an n-wise strategy, so `-s n-wise -n 3` works too.
    #[arg(short, long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub forward_cost: u64,
    #[arg(long, default_value_t = 1)]
    pub backward_cost: u64,
    #[arg(long, default_value_t = 0)]
    pub comm_latency: u64,
    /// Write the event trace as CSV to this path (`-` for stdout).
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Comma separated strategies.
    #[arg(long = "strategies", default_value = "1-wise,2-wise,e2e")]
    pub strategies: String,
    /// Comma separated component counts; each replaces the preset depth.
    #[arg(long = "depths")]
    pub depths: Option<String>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "toy-conv(4,4,6)")]
    pub arch: String,
    #[arg(long, default_value = "linear")]
    pub aux_head: String,
    #[arg(long, default_value = "2-wise")]
    pub strategy: String,
    #[arg(long)]
    pub mix_local: bool,
    /// Per-example input shape, e.g. `3x8x8` or `6`.
    #[arg(long, default_value = "3x8x8")]
    pub input: String,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Coordinates checked per parameter tensor; 0 checks all of them.
    #[arg(long, default_value_t = 12)]
    pub max_coords: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    pub checkpoint: PathBuf,
    /// Dataset settings come from this config plus overrides.
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct SummarizeArgs {
    /// A `metrics.csv` or `results.csv` written by this tool.
    pub file: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Summarize(a) => commands::summarize(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
