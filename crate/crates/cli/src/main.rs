//! `ptqlaw`: evaluate, fit and query scaling laws for quantized language models.

mod commands;
mod output;
mod plotdata;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_CODES: &str = "Exit codes:\n  0  success\n  1  computation or fit failure\n  2  usage or validation error";

#[derive(Debug, Parser)]
#[command(name = "ptqlaw", version, about, after_help = EXIT_CODES)]
pub struct Cli {
    /// Law file in the preset format; replaces the built-in presets.
    #[arg(long, global = true, value_name = "PATH")]
    pub params_file: Option<PathBuf>,
    /// Emit JSON lines instead of CSV or text.
    #[arg(long, global = true)]
    pub json: bool,
    /// Destination file, or `-` for stdout. Files are replaced atomically.
    #[arg(long, short = 'o', global = true, default_value = "-", value_name = "PATH")]
    pub output: String,
    /// TOML file with `[fit]` options and a `[benchmarks]` map.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for synthetic data.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Effective bit-width W_base + (b_s + b_z) / G.
    #[command(after_help = EXIT_CODES)]
    Beff(BeffArgs),
    /// Predicted accuracy of one configuration.
    #[command(after_help = EXIT_CODES)]
    Predict(PredictArgs),
    /// Fit a law to a dataset and write it as a law file.
    #[command(after_help = EXIT_CODES)]
    Fit(FitArgs),
    /// Fit several factor subsets to the same data and compare them.
    #[command(after_help = EXIT_CODES)]
    Ablate(AblateArgs),
    /// Sweep a configuration space for accuracy/storage trade-offs.
    #[command(after_help = EXIT_CODES)]
    Advise(AdviseArgs),
    /// Data series for redrawing accuracy curves and surfaces.
    #[command(after_help = EXIT_CODES)]
    Plotdata(PlotArgs),
    /// Generate a noisy synthetic dataset from a law.
    #[command(after_help = EXIT_CODES, alias = "generate")]
    Synth(SynthArgs),
    /// Inspect the available laws.
    #[command(after_help = EXIT_CODES)]
    Presets(PresetsArgs),
}

#[derive(Debug, Args)]
pub struct BeffArgs {
    #[arg(short = 'w', long)]
    pub w_base: u32,
    #[arg(short = 'g', long)]
    pub g: u32,
    /// Scale bits per group.
    #[arg(long, default_value_t = 16)]
    pub b_s: u32,
    /// Zero-point bits per group; defaults to W_base.
    #[arg(long, conflicts_with = "symmetric")]
    pub b_z: Option<u32>,
    /// Symmetric quantization, no zero-point.
    #[arg(long)]
    pub symmetric: bool,
}

#[derive(Debug, Args)]
pub struct LawArgs {
    /// Built-in preset, or a law name inside --params-file.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct SchemeArgs {
    /// Scale bits per group.
    #[arg(long, default_value_t = 16)]
    pub b_s: u32,
    /// Symmetric quantization, no zero-point.
    #[arg(long)]
    pub symmetric: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub law: LawArgs,
    /// Parameter count, e.g. 6.7e9.
    #[arg(short = 'n', long = "n-params")]
    pub n_params: f64,
    #[arg(long = "cb", alias = "c-b")]
    pub c_b: u32,
    #[arg(short = 'g', long)]
    pub g: u32,
    #[arg(short = 'w', long)]
    pub w_base: u32,
    #[command(flatten)]
    pub scheme: SchemeArgs,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset in CSV, or JSON lines for `.jsonl`/`.ndjson`.
    pub data: PathBuf,
    /// Benchmarks averaged per configuration: general, memorization or utilization.
    #[arg(long, default_value = "general")]
    pub scope: String,
    /// Explicit benchmark list replacing the scope's.
    #[arg(long, value_delimiter = ',')]
    pub benchmarks: Option<Vec<String>>,
    /// Keep only matching rows, e.g. `w_base=2` or `c_b=128|1024,g=32`.
    #[arg(long)]
    pub slice: Option<String>,
    #[command(flatten)]
    pub scheme: SchemeArgs,
}

#[derive(Debug, Args, Default)]
pub struct FitFlags {
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol_step: Option<f64>,
    #[arg(long)]
    pub tol_cost: Option<f64>,
    #[arg(long)]
    pub damping: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Factors to fit, e.g. `N,C_b,G,B_eff` or `const`.
    #[arg(long, default_value = "N,C_b,G,B_eff")]
    pub mask: String,
    /// Pin an exponent, e.g. `G=0`. Repeatable.
    #[arg(long = "fix", value_name = "FACTOR=VALUE")]
    pub fixed: Vec<String>,
    /// Name recorded in the law file.
    #[arg(long, default_value = "fit")]
    pub name: String,
    #[command(flatten)]
    pub options: FitFlags,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Masks separated by `;`, or `all` for every factor subset. Defaults to the four standard forms.
    #[arg(long)]
    pub masks: Option<String>,
    /// Also write every successful fit to this law file.
    #[arg(long, value_name = "PATH")]
    pub laws: Option<String>,
    #[command(flatten)]
    pub options: FitFlags,
}

#[derive(Debug, Args)]
pub struct SpaceArgs {
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub n_params: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub w_base: Option<Vec<u32>>,
    #[arg(long = "c-b", alias = "cb", value_delimiter = ',', num_args = 0..)]
    pub c_b: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub g: Option<Vec<u32>>,
    #[command(flatten)]
    pub scheme: SchemeArgs,
}

#[derive(Debug, Args)]
pub struct AdviseArgs {
    #[command(flatten)]
    pub law: LawArgs,
    #[command(flatten)]
    pub space: SpaceArgs,
    /// Cheapest configuration predicted to reach this accuracy.
    #[arg(long, conflicts_with = "frontier")]
    pub target: Option<f64>,
    /// Only the accuracy/storage Pareto frontier.
    #[arg(long)]
    pub frontier: bool,
    /// Evaluate configurations outside the law's fitted ranges.
    #[arg(long)]
    pub allow_extrapolation: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Figure {
    /// Accuracy against effective bit-width per model size, C_b fixed.
    BeffCurve,
    /// Accuracy against calibration size per base width, N and G fixed.
    CbCurve,
    /// Accuracy against group size per model size, W_base and C_b fixed.
    GsCurve,
    /// Two-bit accuracy over model size, group size and calibration size.
    #[value(name = "surface-2bit")]
    Surface2bit,
    /// Relative gain of memorization and utilization laws along N, C_b and B_eff.
    Sensitivity,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long, value_enum)]
    pub figure: Figure,
    #[command(flatten)]
    pub law: LawArgs,
    #[command(flatten)]
    pub space: SpaceArgs,
    /// Held-fixed model size where a figure needs one.
    #[arg(long)]
    pub at_n: Option<f64>,
    /// Held-fixed base width where a figure needs one.
    #[arg(long)]
    pub at_w: Option<u32>,
    /// Held-fixed calibration size where a figure needs one.
    #[arg(long)]
    pub at_cb: Option<u32>,
    /// Held-fixed group size where a figure needs one.
    #[arg(long)]
    pub at_g: Option<u32>,
    /// Law family for the sensitivity figure: opt or llama2.
    #[arg(long, default_value = "opt")]
    pub family: String,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub law: LawArgs,
    #[command(flatten)]
    pub space: SpaceArgs,
    /// Standard deviation of the additive Gaussian noise per benchmark.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    /// Value of the model_family column.
    #[arg(long, default_value = "synthetic")]
    pub family: String,
}

#[derive(Debug, Args)]
pub struct PresetsArgs {
    #[command(subcommand)]
    pub action: PresetsAction,
}

#[derive(Debug, Subcommand)]
pub enum PresetsAction {
    /// One row per law.
    List,
    /// One law as a law file.
    Show { name: String },
    /// Every law as a law file.
    Export,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
