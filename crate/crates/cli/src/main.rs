//! `canonkit`: synthetic data, losses, canonicalization, fitting and
//! evaluation over the dataset directory layout.

mod commands;
mod run;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use canonkit::fit::InitMode;
use canonkit::synth::Category;

use run::CliError;

#[derive(Parser, Debug)]
#[command(name = "canonkit", version, about = "Dense canonicalization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "snake_case")]
enum Command {
    /// Render a synthetic dataset.
    Synth(SynthArgs),
    /// Evaluate the loss terms on one triplet.
    Loss(LossArgs),
    /// Warp a source view into a target view.
    Warp(WarpArgs),
    /// Keypoint canonicalization and depth-derived NOCS maps for every view.
    Canon(CanonArgs),
    /// Per-pixel optimization of depth and NOCS fields on one triplet.
    Fit(FitArgs),
    /// Pose, map and dispersion metrics.
    Eval(EvalArgs),
    /// SVG chart from a CSV file.
    Plot(PlotArgs),
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long, value_parser = parse_category, default_value = "car-like")]
    category: Category,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 12)]
    views: usize,
    /// WIDTHxHEIGHT
    #[arg(long, value_parser = parse_resolution, default_value = "160x120")]
    res: (usize, usize),
    /// Helix radius as a multiple of the instance extent.
    #[arg(long, default_value_t = 2.5)]
    radius_factor: f64,
    /// First instance seed; instances use consecutive seeds.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// One view of one instance in a dataset.
#[derive(Args, Debug, Clone, Serialize)]
struct ViewArgs {
    #[arg(long)]
    data: PathBuf,
    /// Instance seed.
    #[arg(long, default_value_t = 0)]
    instance: u64,
    #[arg(long, default_value_t = 1)]
    target: usize,
}

#[derive(Args, Debug, Serialize)]
struct LossArgs {
    #[command(flatten)]
    view: ViewArgs,
    /// Source views; defaults to the neighbours of the target.
    #[arg(long, value_delimiter = ',')]
    sources: Vec<usize>,
    #[arg(long, default_value_t = canonkit::losses::DEFAULT_ALPHA)]
    alpha: f64,
    /// Multiplies the target depth before evaluation.
    #[arg(long, default_value_t = 1.0)]
    depth_scale: f64,
    /// Depth PFM to use instead of the ground truth.
    #[arg(long)]
    depth: Option<PathBuf>,
    /// NOCS PFM to use instead of the ground truth.
    #[arg(long)]
    nocs: Option<PathBuf>,
    /// Include the perceptual term with a fixed random feature bank.
    #[arg(long)]
    perceptual: bool,
    /// Write per-pixel residual maps.
    #[arg(long)]
    residuals: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct WarpArgs {
    #[command(flatten)]
    view: ViewArgs,
    #[arg(long)]
    source: usize,
    #[arg(long, default_value_t = 1.0)]
    depth_scale: f64,
    /// Warp the NOCS map instead of the RGB image.
    #[arg(long)]
    nocs: bool,
    /// Also reject samples that disagree with the source depth.
    #[arg(long)]
    occlusion: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct CanonArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum StageArg {
    Depth,
    Nocs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum InitArg {
    Flat,
    NoisyGt,
    Gt,
    DepthDerived,
}

impl From<InitArg> for InitMode {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::Flat => InitMode::Flat,
            InitArg::NoisyGt => InitMode::NoisyGt,
            InitArg::Gt => InitMode::Gt,
            InitArg::DepthDerived => InitMode::DepthDerived,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct FitArgs {
    #[command(flatten)]
    view: ViewArgs,
    #[arg(long, value_enum, default_value = "depth")]
    stage: StageArg,
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    /// Defaults to 0.5 for depth and 0.01 for NOCS.
    #[arg(long)]
    step_size: Option<f64>,
    /// Initialization of the optimized field. `depth-derived` applies to NOCS only.
    #[arg(long, value_enum, default_value = "flat")]
    init: InitArg,
    #[arg(long, default_value_t = 0.05)]
    noise_sigma: f64,
    #[arg(long)]
    w_photometric: Option<f64>,
    #[arg(long)]
    w_smoothness: Option<f64>,
    #[arg(long)]
    w_geometric: Option<f64>,
    #[arg(long, default_value_t = 1)]
    log_every: usize,
    /// Plain gradient descent: accept every step.
    #[arg(long)]
    no_backtracking: bool,
    /// Finite-difference gradients (slow).
    #[arg(long)]
    finite_difference: bool,
    /// Depth PFM for the NOCS stage, e.g. a depth-stage result; defaults to
    /// the ground truth.
    #[arg(long)]
    depth: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output of `canon`; without it the ground-truth NOCS maps are scored.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Also write the joint rotation/translation heatmap.
    #[arg(long)]
    heatmap: bool,
    #[arg(long, default_value_t = 60.0)]
    rot_max: f64,
    #[arg(long, default_value_t = 5.0)]
    rot_step: f64,
    #[arg(long, default_value_t = 0.25)]
    trans_max: f64,
    #[arg(long, default_value_t = 0.025)]
    trans_step: f64,
    /// Keypoint tracked by the dispersion histograms.
    #[arg(long, default_value_t = 0)]
    keypoint: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct PlotArgs {
    #[arg(long)]
    input: PathBuf,
    /// Output SVG file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    title: Option<String>,
}

fn parse_category(s: &str) -> Result<Category, String> {
    s.parse::<Category>().map_err(|e| e.to_string())
}

fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad resolution {s:?}"));
    Ok((parse(w)?, parse(h)?))
}

fn dispatch(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => commands::synth(a),
        Command::Loss(a) => commands::loss(a),
        Command::Warp(a) => commands::warp(a),
        Command::Canon(a) => commands::canon(a),
        Command::Fit(a) => commands::fit(a),
        Command::Eval(a) => commands::eval(a),
        Command::Plot(a) => commands::plot(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = run::configure_threads().and_then(|_| dispatch(&cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
