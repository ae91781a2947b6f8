//! `fusionreg` command-line entry point.

mod commands;
mod runlog;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit status for malformed invocations.
pub const EXIT_USAGE: u8 = 2;
/// Exit status for failures after the arguments were accepted.
pub const EXIT_INTERNAL: u8 = 1;

#[derive(Debug, Parser)]
#[command(name = "fusionreg", version, about = "Post-fusion registration of infrared/visible image fusions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a registration model on a `vi/` + `ir/` dataset.
    Train(TrainArgs),
    /// Correct one fused image with a trained checkpoint.
    Register(RegisterArgs),
    /// Write misregistered training quadruples for inspection.
    Simulate(SimulateArgs),
    /// Quality metrics and mask overlap before and after registration.
    Evaluate(EvaluateArgs),
    /// Patch-similarity map between a fused image and its reference.
    PriorAnalysis(PriorArgs),
    /// Warp an image by a constant displacement.
    WarpDemo(WarpDemoArgs),
    /// Run the built-in property suite.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root with `vi/`, `ir/` and optionally `fused/`.
    #[arg(long)]
    pub data: PathBuf,
    /// `key = value` configuration file; without it the desk preset is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint (weights, optimizer state, counters, RNG).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Disable the modality retainment block.
    #[arg(long)]
    pub no_mrb: bool,
    /// Plain backward warp instead of the bidirectional blend.
    #[arg(long)]
    pub one_way_warp: bool,
    #[arg(long, value_parser = ["gmlp", "dc", "dt"])]
    pub mrb_variant: Option<String>,
    /// Pyramid depth.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub vi: PathBuf,
    #[arg(long)]
    pub ir: PathBuf,
    /// Fused image to correct. Required unless `--fuse-internally`.
    #[arg(long, required_unless_present = "fuse_internally")]
    pub fused: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fuse `vi` and `ir` with the built-in fuser instead of reading `--fused`.
    #[arg(long, conflicts_with = "fused")]
    pub fuse_internally: bool,
    #[arg(long, default_value = "max", value_parser = ["max", "mean"])]
    pub fuser: String,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Dataset root with `vi/` and `ir/`.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "max", value_parser = ["max", "mean"])]
    pub fuser: String,
    /// Quadruples to write; pairs are visited round-robin.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Apply flips and quarter turns to the infrared image only.
    #[arg(long)]
    pub deform_only_ir: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Fused images before registration, `<stem>.png`.
    #[arg(long)]
    pub before: PathBuf,
    /// Registered images with the same stems.
    #[arg(long)]
    pub after: PathBuf,
    /// Mask root with `before/` and `after/` holding `<stem>_<obj>_{a,b}.png`.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PriorArgs {
    #[arg(long)]
    pub fused: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub patch: usize,
    #[arg(long, default_value_t = 16)]
    pub stride: usize,
    /// Heat image path; the raw values go to the same path with `.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct WarpDemoArgs {
    /// Image to warp; a checkerboard is generated when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 1.5, allow_negative_numbers = true)]
    pub dx: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub dy: f64,
    /// Side of the generated checkerboard.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for `run.json`.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Swap in a warp with the wrong displacement sign (negative control).
    #[arg(long, hide = true)]
    pub corrupt_warp: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Register(a) => commands::register(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::PriorAnalysis(a) => commands::prior_analysis(a),
        Command::WarpDemo(a) => commands::warp_demo(a),
        Command::Selftest(a) => commands::selftest(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is_usage() {
                eprintln!("run `fusionreg --help` for usage");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
