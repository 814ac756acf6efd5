//! `aqinfer`: aggregate mobile readings, build the location graph, train and
//! apply the graph autoencoder, benchmark completion methods, and generate
//! synthetic traces.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "aqinfer",
    version,
    about = "Air-quality inference from sparse mobile measurements"
)]
#[command(after_help = "Log verbosity follows RUST_LOG (default: warn).\n\
Exit codes: 0 ok, 1 internal error, 2 input error, 3 numerical failure.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Bin a measurement CSV into a location × time-slot observation matrix.
    Aggregate(AggregateArgs),
    /// Connect nearby locations into a weighted graph.
    BuildGraph(BuildGraphArgs),
    /// Train the graph autoencoder on an observation matrix.
    Train(TrainArgs),
    /// Complete every cell of an observation matrix with a trained model.
    Infer(InferArgs),
    /// Benchmark completion methods on random holdouts of the known entries.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic street grid, pollution field and vehicle trace.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct AggregateArgs {
    /// Measurement CSV with header timestamp,lat,lon,value.
    #[arg(long)]
    input: PathBuf,
    /// Time-slot length in seconds.
    #[arg(long, default_value_t = 3600)]
    tau: i64,
    /// Location radius in meters.
    #[arg(long, default_value_t = 100.0)]
    radius: f64,
    /// Period start (epoch seconds or ISO-8601). Defaults to the first reading, floored to tau.
    #[arg(long)]
    from: Option<String>,
    /// Exclusive period end. Defaults to just past the last reading, rounded up to tau.
    #[arg(long)]
    to: Option<String>,
    /// Output observation matrix (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BuildGraphArgs {
    /// Observation matrix (JSON) whose locations become nodes.
    #[arg(long)]
    obs: PathBuf,
    /// Street network (JSON); nodes snapped to the same segment are linked.
    #[arg(long)]
    network: Option<PathBuf>,
    /// Distance threshold in meters.
    #[arg(long, default_value_t = 200.0)]
    delta: f64,
    /// Output graph (JSON).
    #[arg(long)]
    out: PathBuf,
}

/// Model settings shared by `train` and `evaluate`. Precedence, lowest first:
/// built-in defaults (or `--desk-scale`), `--config`, individual flags.
#[derive(Debug, Args, Clone)]
struct ModelArgs {
    /// AVGAE config (JSON); omitted fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the small desk-scale model (D=64, no dropout).
    #[arg(long)]
    desk_scale: bool,
    /// Latent width D [default: 512].
    #[arg(long)]
    latent_dim: Option<usize>,
    /// KL weight beta [default: 0.1].
    #[arg(long)]
    kl_weight: Option<f64>,
    /// Temporal smoothness weight gamma [default: 0.8].
    #[arg(long)]
    smooth_weight: Option<f64>,
    /// Smoothness window w_T in slots [default: 3].
    #[arg(long)]
    smooth_window: Option<usize>,
    /// Dropout rate [default: 0.4].
    #[arg(long)]
    dropout: Option<f64>,
    /// Learning rate [default: 0.005].
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Maximum epochs [default: 2000].
    #[arg(long)]
    epochs: Option<usize>,
    /// Early-stopping patience in epochs [default: 200].
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Observation matrix (JSON).
    #[arg(long)]
    obs: PathBuf,
    /// Graph (JSON) built over the same locations.
    #[arg(long)]
    graph: PathBuf,
    /// Random seed for initialization, noise and dropout.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelArgs,
    /// Output checkpoint (JSON). The per-epoch log goes to <out>.log.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InferArgs {
    /// Trained checkpoint (JSON).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Observation matrix (JSON) to complete.
    #[arg(long)]
    obs: PathBuf,
    /// Graph (JSON) over the matrix locations.
    #[arg(long)]
    graph: PathBuf,
    /// Output completed matrix (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Observation matrix (JSON).
    #[arg(long)]
    obs: PathBuf,
    /// Graph (JSON) over the matrix locations.
    #[arg(long)]
    graph: PathBuf,
    /// Comma-separated methods: avgae, kriging-linear, kriging-exp, knn, svd, nmf, global-mean.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "avgae,kriging-linear,kriging-exp,knn,svd,nmf"
    )]
    methods: Vec<String>,
    /// Number of random holdout splits.
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Share of known entries used for training in each split.
    #[arg(long, default_value_t = 0.9)]
    train_fraction: f64,
    /// Seed for the splits and for the seeded methods.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset label in the report. Defaults to the observation file stem.
    #[arg(long)]
    dataset: Option<String>,
    #[command(flatten)]
    model: ModelArgs,
    /// Output report (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// 76×76 grid, 24 vehicles, 30 days.
    PaperScale,
    /// 12×12 grid, 4 vehicles, 3 days.
    DeskScale,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value_t = Preset::DeskScale)]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Synth config (JSON) overriding preset fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for trace.csv, network.json, field.json and manifest.json.
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Aggregate(a) => commands::aggregate(a),
        Command::BuildGraph(a) => commands::build_graph(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<aqinfer::Error>()) {
        Some(err) if err.is_numerical_failure() => 3,
        Some(err) if err.is_input_error() => 2,
        _ => 1,
    }
}
