use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sardino::decoders::DecoderMode;
use sardino::geodata::Split;

mod commands;

/// Self-distillation pre-training and land-cover segmentation on SAR tiles.
#[derive(Parser, Debug)]
#[command(name = "sardino", version, arg_required_else_help = true)]
struct Cli {
    /// Print every configuration key with its default value and exit.
    #[arg(long)]
    dump_defaults: bool,

    /// Experiment configuration file (`key = value` lines).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads; 1 makes every output byte-reproducible.
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,

    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic labeled tiles and a manifest.
    Synth(SynthArgs),
    /// DINO self-distillation pre-training of the ViT backbone.
    Pretrain(PretrainArgs),
    /// Train a segmentation decoder on a fraction of the train split.
    Finetune(FinetuneArgs),
    /// Score a fine-tuned checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Write per-tile attention rasters and PNG contact sheets.
    ExtractAttention(AttentionArgs),
    /// Finite-difference check of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Run the init/freeze by fraction grid for each encoding mode.
    Grid(GridArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Number of tiles.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// Generator seed [default: config seed].
    #[arg(long)]
    seed: Option<u64>,
    /// Tile edge in pixels [default: data.tile_size].
    #[arg(long, value_name = "PX", value_parser = clap::value_parser!(u64).range(1..))]
    size: Option<u64>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long, value_name = "CKPT")]
    out: PathBuf,
    /// Per-epoch metrics CSV [default: <out>.metrics.csv].
    #[arg(long, value_name = "CSV")]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long)]
    mode: DecoderMode,
    /// `scratch` or a pre-training checkpoint.
    #[arg(long, default_value = "scratch")]
    init: String,
    #[arg(long, action = clap::ArgAction::Set, default_value_t = false)]
    freeze: bool,
    /// Fraction of the train split to use [default: finetune.fraction].
    #[arg(long)]
    fraction: Option<f64>,
    /// Best-validation checkpoint to write.
    #[arg(long, value_name = "CKPT")]
    out: PathBuf,
    /// Per-epoch metrics CSV [default: <out>.metrics.csv].
    #[arg(long, value_name = "CSV")]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long, value_name = "CKPT")]
    model: PathBuf,
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Results CSV to write.
    #[arg(long, value_name = "CSV")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AttentionArgs {
    #[arg(long, value_name = "CKPT")]
    model: PathBuf,
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Corrupt the analytic gradient of the named check.
    #[arg(long, hide = true)]
    tamper: Option<String>,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Pre-training checkpoint shared by the pre-trained rows.
    #[arg(long, value_name = "CKPT")]
    pretrained: Option<PathBuf>,
    /// Results CSV to write.
    #[arg(long, value_name = "CSV")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .format_target(false)
        .init();
    if cli.dump_defaults {
        print!("{}", sardino::config::ExperimentConfig::dump_defaults());
        return ExitCode::SUCCESS;
    }
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let Some(command) = cli.command else {
        eprintln!("error: no command given (see --help)");
        return ExitCode::from(2);
    };
    match commands::run(command, cli.config.as_deref()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
