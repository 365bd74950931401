//! `vaeseg`: train and run a 3D encoder-decoder segmentation network with a
//! variational reconstruction branch, on RVOL volume files.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vaeseg::commands;
use vaeseg::data::Difficulty;

#[derive(Parser)]
#[command(name = "vaeseg", version, about = "3D tumor segmentation trainer and inference tool")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset of image/label RVOL pairs.
    GenData {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of cases to generate.
        #[arg(long)]
        count: usize,
        /// Cubic volume edge length; must be divisible by 8.
        #[arg(long)]
        size: usize,
        /// Base seed; case k uses seed + k.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Noise level: low, medium, or high.
        #[arg(long, default_value = "low")]
        difficulty: Difficulty,
    },
    /// Train a model from a TOML run configuration.
    Train {
        /// TOML run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Directory for checkpoints and the epoch log.
        #[arg(long)]
        out: PathBuf,
        /// Continue from an earlier checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Segment one image volume with an ensemble of checkpoints.
    Infer {
        /// Checkpoint file; repeat to ensemble.
        #[arg(long = "ckpt", required = true)]
        ckpts: Vec<PathBuf>,
        /// Input image RVOL file.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output label RVOL file.
        #[arg(long = "out")]
        output: PathBuf,
        /// Average over all eight axis-flip variants.
        #[arg(long)]
        tta: bool,
        /// Probability cut for label decoding, in (0, 1).
        #[arg(long)]
        threshold: Option<f32>,
    },
    /// Compare predicted labels against ground truth and write a report.
    Eval {
        /// Directory of predicted .lbl.rvol files.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of reference .lbl.rvol files.
        #[arg(long)]
        gt: PathBuf,
        /// Path of the JSON report to write.
        #[arg(long)]
        report: PathBuf,
    },
}

fn run(cli: Cli) -> vaeseg::Result<()> {
    match cli.command {
        Command::GenData { out, count, size, seed, difficulty } => {
            commands::cmd_gen_data(&out, count, size, seed, difficulty)?;
        }
        Command::Train { config, out, resume } => {
            commands::cmd_train(&config, &out, resume.as_deref())?;
        }
        Command::Infer { ckpts, input, output, tta, threshold } => {
            commands::cmd_infer(&ckpts, &input, &output, tta, threshold)?;
        }
        Command::Eval { pred, gt, report } => {
            commands::cmd_eval(&pred, &gt, &report)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // usage mistakes are validation errors (exit 1); --help/--version exit 0
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
