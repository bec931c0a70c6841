//! `srma`: train, evaluate and inspect the segmentation model on synthetic
//! multi-domain data.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "srma",
    version,
    about = "Semantic-region style rearrangement and multi-level alignment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic domain to a dataset directory.
    Generate(GenerateArgs),
    /// Train from a TOML run configuration.
    Train(TrainArgs),
    /// Per-category IoU of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Chamfer-distance domain invariance between a source and target sets.
    Analyze(AnalyzeArgs),
    /// Show the statistics behind one rearranged shallow feature map.
    PreviewRearrange(PreviewArgs),
    /// Write pooled or per-pixel features as CSV for external projection.
    ExportEmbeddings(ExportArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Source,
    TargetA,
    TargetB,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value = "source")]
    preset: Preset,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 5)]
    categories: usize,
    /// Domains sharing a layout seed share label maps.
    #[arg(long, default_value_t = 1)]
    layout_seed: u64,
    /// Pixel-noise seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `train.max_steps`.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    no_srm: bool,
    #[arg(long)]
    no_mla_global: bool,
    #[arg(long)]
    no_mla_regional: bool,
    #[arg(long)]
    no_mla_local: bool,
    #[arg(long)]
    no_pc: bool,
    #[arg(long)]
    no_style_elim: bool,
    #[arg(long)]
    unfreeze_layer0: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    source: PathBuf,
    /// One or more target datasets; each becomes a table row.
    #[arg(long, num_args = 1.., required = true)]
    target: Vec<PathBuf>,
    #[arg(long, default_value_t = srma_core::invariance::DEFAULT_TRIALS)]
    trials: usize,
    #[arg(long, default_value_t = srma_core::invariance::DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = srma_core::invariance::DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    layer: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PreviewArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Network supplying layer 0; a fresh one with `--net-seed` otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    net_seed: u64,
    /// Position of the sample in the manifest.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = srma_core::srm::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportLevel {
    Global,
    Regional,
    Local,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 4)]
    layer: usize,
    #[arg(long, value_enum, default_value = "regional")]
    level: ExportLevel,
    /// Value of the `domain` column; defaults to the dataset directory name.
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// global, regional, local, mla, pc, task, network or all.
    #[arg(long, default_value = "all")]
    loss: String,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long, default_value_t = 3)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::PreviewRearrange(a) => commands::preview(a),
        Command::ExportEmbeddings(a) => commands::export(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
