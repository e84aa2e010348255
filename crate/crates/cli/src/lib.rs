//! Command-line front end: argument definitions and dispatch.

mod commands;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use anyhow::Result;

use output::{Format, Report};

#[derive(Debug, Parser)]
#[command(name = "edptune", version, about = "Time, energy and EDP analysis of DNN training configurations")]
pub struct Cli {
    /// Write the result here instead of standard output.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value = "csv")]
    pub format: Format,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer operation and memory-traffic counts of a network.
    Analyze(AnalyzeArgs),
    /// Energy of labelled regions of a power trace.
    Integrate(IntegrateArgs),
    /// Fit per-batch time and energy models to measurements.
    Calibrate(CalibrateArgs),
    /// Evaluate fitted models at given batch sizes.
    Predict(PredictArgs),
    /// Rank training configurations by time, energy or EDP.
    Rank(RankArgs),
    /// Pick a batch size and GPU set for a network.
    Recommend(RecommendArgs),
    /// Generate a synthetic power trace.
    GenTrace(GenTraceArgs),
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Architecture description file.
    #[arg(conflicts_with = "builtin", required_unless_present = "builtin")]
    pub arch: Option<PathBuf>,
    /// One of two_d_cnn, resnet_gait, caffenet, resnet_im.
    #[arg(long)]
    pub builtin: Option<String>,
    /// Number of output classes of a built-in network.
    #[arg(long, requires = "builtin")]
    pub classes: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub batch: u64,
    #[arg(long, default_value_t = edptune::costmodel::DEFAULT_ELEMENT_BYTES)]
    pub element_bytes: u64,
    /// Count k²·Cin weights per filter for convolutions and pools, ignoring groups.
    #[arg(long)]
    pub literal_weights: bool,
}

#[derive(Debug, Args)]
pub struct IntegrateArgs {
    /// Power trace CSV (`t` column then one column per channel).
    pub trace: PathBuf,
    /// Regions CSV (`id,label,t_start,t_end`).
    pub regions: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Measurement CSV.
    #[arg(long, conflicts_with = "bundled", required_unless_present = "bundled")]
    pub measurements: Option<PathBuf>,
    /// Use the bundled Titan X Pascal / Maxwell measurements.
    #[arg(long)]
    pub bundled: bool,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Write the fitted models here.
    #[arg(long)]
    pub models_out: Option<PathBuf>,
    /// Groups measured on more GPUs than this are not fitted.
    #[arg(long, default_value_t = 2)]
    pub max_gpus: u32,
    /// Fits below this R² are reported as poor.
    #[arg(long, default_value_t = 0.95)]
    pub min_r2: f64,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model file written by `calibrate`.
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long)]
    pub device: String,
    #[arg(long)]
    pub network: String,
    /// forward or backward; both when omitted.
    #[arg(long)]
    pub step: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub gpus: u32,
    #[arg(long, value_delimiter = ',', required = true)]
    pub batch: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Device name or generation; repeatable. Defaults to every measured device.
    #[arg(long)]
    pub device: Vec<String>,
    /// Restrict to these networks.
    #[arg(long)]
    pub network: Vec<String>,
    /// Batch sizes; defaults to the measured ones.
    #[arg(long, value_delimiter = ',')]
    pub batch: Vec<u64>,
    /// GPU set such as `titan_x_pascal:2+titan_x_maxwell:2`; repeatable.
    #[arg(long)]
    pub set: Vec<String>,
    /// GPU set file; repeatable.
    #[arg(long)]
    pub gpu_set: Vec<PathBuf>,
    /// Device profile file; repeatable.
    #[arg(long)]
    pub profile: Vec<PathBuf>,
    /// Architecture file for a measured network; repeatable.
    #[arg(long)]
    pub arch: Vec<PathBuf>,
    /// Training plan CSV (`network,batch,iterations,epochs`).
    #[arg(long)]
    pub plans: Option<PathBuf>,
    /// Derive iterations from a dataset size when no plan row exists.
    #[arg(long, requires = "epochs")]
    pub dataset_samples: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Fill gaps with calibrated models (fitted from the measurements unless --models is given).
    #[arg(long)]
    pub predict: bool,
    #[arg(long, requires = "predict")]
    pub models: Option<PathBuf>,
    /// Extra time and energy for the weight update, as a fraction of forward+backward.
    #[arg(long, default_value_t = 0.0)]
    pub update_adjustment: f64,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long, default_value = "edp", value_parser = parse_metric)]
    pub metric: edptune::tuner::Metric,
}

#[derive(Debug, Args)]
pub struct RecommendArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    /// small or large; inferred for built-in networks.
    #[arg(long)]
    pub dataset: Option<String>,
    /// plain_conv or residual; inferred for built-in networks.
    #[arg(long)]
    pub family: Option<String>,
    /// Accuracy CSV (`network,batch,metric,value`); bundled tables are used with --bundled.
    #[arg(long)]
    pub accuracy: Option<PathBuf>,
    #[arg(long)]
    pub accuracy_metric: Option<String>,
    #[arg(long, default_value_t = edptune::tuner::DEFAULT_ACCURACY_TOLERANCE_PCT)]
    pub tolerance_pct: f64,
}

#[derive(Debug, Args)]
pub struct GenTraceArgs {
    /// `START:END:WATTS[:END_WATTS]`, seconds and watts; repeatable, in time order.
    #[arg(long, required = true)]
    pub segment: Vec<String>,
    /// Samples per second.
    #[arg(long, default_value_t = 1000.0)]
    pub rate: f64,
    /// `LABEL:WEIGHT`; repeatable. Defaults to a single `gpu` channel.
    #[arg(long)]
    pub channel: Vec<String>,
    /// Gaussian noise standard deviation in watts.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write one region per segment to this file.
    #[arg(long)]
    pub regions_out: Option<PathBuf>,
}

fn parse_metric(s: &str) -> std::result::Result<edptune::tuner::Metric, String> {
    s.parse()
}

/// Runs one parsed invocation and returns the report to print.
pub fn execute(cli: &Cli) -> Result<Report> {
    match &cli.command {
        Command::Analyze(a) => commands::analyze(a),
        Command::Integrate(a) => commands::integrate(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Predict(a) => commands::predict(a),
        Command::Rank(a) => commands::rank(a),
        Command::Recommend(a) => commands::recommend(a),
        Command::GenTrace(a) => commands::gen_trace(a),
    }
}
