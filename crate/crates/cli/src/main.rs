use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "taskcast", version, about = "Next-action forecasting with progress-aware LSTM streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML experiment config; explicit flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory. Defaults to a named folder under the output root.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root for default run directories.
    #[arg(long, global = true, env = "TASKCAST_OUT_ROOT", default_value = "runs")]
    out_root: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset from a task grammar.
    GenData(GenDataArgs),
    /// Train one model variant.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    GradCheck(GradCheckArgs),
    /// Train and score every model variant over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// `ikea-default` or a TOML/JSON grammar file.
    #[arg(long, default_value = "ikea-default")]
    grammar: String,
    #[arg(long)]
    sequences: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    feature_dim: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory; without it a synthetic dataset is generated.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "ikea-default")]
    grammar: String,
    /// `local`, `combined`, or granularities such as `+5+10`.
    #[arg(long, default_value = "combined")]
    model: String,
    /// cross-entropy, cploss or l2.
    #[arg(long)]
    progress_loss: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batches_per_epoch: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Sequences held out from the end of the dataset for testing.
    #[arg(long)]
    test_sequences: Option<usize>,
    /// Standardise features with training-split statistics.
    #[arg(long)]
    standardize: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Score only this many sequences from the end; 0 scores all of them.
    #[arg(long, default_value_t = 0)]
    test_sequences: usize,
    /// Statistics written by `train --standardize`.
    #[arg(long)]
    standardizer: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[command(flatten)]
    common: Common,
    /// Component name or `all`.
    #[arg(long, default_value = "all")]
    component: String,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides each component's own tolerance.
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "ikea-default")]
    grammar: String,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "cross-entropy,cploss")]
    progress_loss: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "local,+5,+5+10,+5+10+20")]
    variants: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batches_per_epoch: Option<usize>,
    #[arg(long)]
    test_sequences: Option<usize>,
    #[arg(long)]
    standardize: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::GradCheck(a) => commands::grad_check(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
