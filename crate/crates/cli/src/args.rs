use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "tempbc", version, about = "Temporal stochastic bias correction of daily temperature series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic observation / climate-model pair with known biases.
    Synth(SynthArgs),
    /// Fit the attention model and write a checkpoint plus training log.
    Train(TrainArgs),
    /// Generate observation trajectories from a checkpoint.
    Sample(SampleArgs),
    /// Apply a classical bias-correction method.
    Baseline(BaselineArgs),
    /// Score one candidate file against observations.
    Eval(EvalArgs),
    /// Compare the model and baselines: heatwave distributions and a summary table.
    Report(ReportArgs),
}

/// Input series, given directly or through a JSON file with keys
/// `obs`, `gcm`, `epoch` and `location_id`.
#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Observation CSV (`t,value`).
    #[arg(long)]
    pub obs: Option<PathBuf>,
    /// Climate-model CSV (`t,run,value`).
    #[arg(long)]
    pub gcm: Option<PathBuf>,
    /// Calendar date of day 0, `YYYY-MM-DD`.
    #[arg(long)]
    pub epoch: Option<String>,
    #[arg(long)]
    pub location: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// JSON with any of the flags below plus a `kernel` object.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub mean_bias: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub time_shift: Option<f64>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Use an RBF kernel with this lengthscale (days).
    #[arg(long)]
    pub lengthscale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// JSON with optional `model` and `train` sections; time features come from `model`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Checkpoint path; defaults to `<out-dir>/checkpoint.json`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Ignore observations after this day.
    #[arg(long)]
    pub train_end: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sampler settings as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub trajectories: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// First generated day; defaults to the day after the last observation.
    #[arg(long)]
    pub start: Option<f64>,
    /// Emit predictive means instead of draws.
    #[arg(long)]
    pub deterministic: bool,
    /// Sample only this run.
    #[arg(long)]
    pub run: Option<u32>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// One of mean, meanvar, eqm, ecbc.
    #[arg(long)]
    pub method: Option<String>,
    /// Baseline settings as JSON; flags override.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    pub ref_start: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub ref_end: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub proj_start: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub proj_end: Option<f64>,
    /// Rank template period for ecbc; defaults to the reference period.
    #[arg(long, allow_hyphen_values = true)]
    pub template_start: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub template_end: Option<f64>,
    /// Correct all days together instead of per calendar month.
    #[arg(long)]
    pub pooled: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Samples (`run,trajectory,t,value`) or baseline output (`run,t,value`).
    #[arg(long)]
    pub candidate: PathBuf,
    /// Observation CSV (`t,value`).
    #[arg(long)]
    pub obs: PathBuf,
    /// Predictive file from `sample`; switches the log-likelihood to the mixture convention.
    #[arg(long)]
    pub predictive: Option<PathBuf>,
    /// Score only this run.
    #[arg(long)]
    pub run: Option<u32>,
    /// Report settings as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Heatwave threshold in degrees.
    #[arg(long, allow_hyphen_values = true)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Prefix of the output file names.
    #[arg(long, default_value = "eval")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub obs: PathBuf,
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub predictive: Option<PathBuf>,
    /// Baseline output as `NAME=PATH`; repeatable.
    #[arg(long = "baseline", value_name = "NAME=PATH")]
    pub baselines: Vec<String>,
    /// Raw climate-model CSV, reported as an uncorrected row.
    #[arg(long)]
    pub gcm: Option<PathBuf>,
    /// Heatwave thresholds in degrees.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub thresholds: Vec<f64>,
    /// Report settings as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}
