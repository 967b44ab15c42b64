mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "vesselseg", version = run::VERSION, about = "Semi-supervised vessel segmentation pipeline")]
struct Cli {
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic vascular phantom suite with a manifest.
    Phantom(PhantomArgs),
    /// Resample, suppress background and index patches for every case.
    Preprocess(PreprocessArgs),
    /// Train the teacher-student model.
    Train(TrainArgs),
    /// Sliding-window inference with a trained checkpoint.
    Predict(PredictArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Render evaluation reports as tables; list config provenance.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML file overriding generator parameters.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Train/val/test ratios for the patient-wise split.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.75, 0.0625, 0.1875])]
    split: Vec<f64>,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training config supplying spacing, patch grid and AHA settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, required_unless_present = "from_run")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, conflicts_with = "from_run")]
    config: Option<PathBuf>,
    /// Replay the manifest and configuration recorded in a `run.json`.
    #[arg(long)]
    from_run: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from `last.ckpt` in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum NetworkArg {
    Student,
    Teacher,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum MeshFormat {
    Stl,
    Obj,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Manifest split to predict: train, val, test or all.
    #[arg(long, default_value = "test")]
    split: String,
    /// Override the network chosen in the checkpoint's config.
    #[arg(long, value_enum)]
    network: Option<NetworkArg>,
    /// Also write the vessel probability map.
    #[arg(long)]
    save_prob: bool,
    /// Also export a surface mesh of each predicted mask.
    #[arg(long, value_enum)]
    mesh: Option<MeshFormat>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum GtArg {
    /// The (possibly partial) training label.
    Mask,
    /// Complete ground truth, when the manifest provides it.
    Full,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum RoiArg {
    /// The case's annotation extent.
    Extent,
    /// The whole grid.
    Full,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_enum, default_value = "mask")]
    gt: GtArg,
    #[arg(long, value_enum, default_value = "extent")]
    roi: RoiArg,
    /// Column name in rendered tables.
    #[arg(long, default_value = "model")]
    name: String,
    /// Earlier report to test against (paired on surface error).
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Average both directions of the surface error.
    #[arg(long)]
    symmetric: bool,
    /// Config for mapping ground truth to network space; defaults to the
    /// one recorded by `predict`.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Format {
    Md,
    Csv,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// One or more evaluation reports, one table column each.
    #[arg(long = "in", required_unless_present = "provenance")]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "md")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
    /// A `run.json` or train TOML whose hyperparameter sources to list.
    #[arg(long)]
    provenance: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let argv: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::Phantom(a) => commands::phantom(a, &argv),
        Command::Preprocess(a) => commands::preprocess(a, &argv),
        Command::Train(a) => commands::train(a, &argv),
        Command::Predict(a) => commands::predict(a, &argv),
        Command::Evaluate(a) => commands::evaluate(a, &argv),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
