//! `landmatch` — synthesize image pairs, train the matcher, run inference,
//! and evaluate against classical keypoint baselines.
//!
//! All commands share one TOML configuration (`--config`), a handful of
//! override flags, and a run directory that receives every artifact plus an
//! echo of the effective configuration. Exit codes: 0 success, 1 usage or
//! config error, 2 data error, 3 numeric failure.

mod commands;
mod config;
mod errors;
mod pairs;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::errors::{usage, CliResult, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "landmatch", version, about = "Self-supervised landmark matching toolkit")]
struct Cli {
    /// TOML run configuration; omitted means all defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Run directory receiving all artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    /// Seed for training and pair generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-pair fan-out and numeric kernels.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Landmark probability cutoff at inference.
    #[arg(long, global = true)]
    thresh_landmark: Option<f64>,
    /// Hinge margin inside which positive pairs stop contributing.
    #[arg(long, global = true)]
    m_pos: Option<f64>,
    /// Hinge margin negatives are pushed beyond.
    #[arg(long, global = true)]
    m_neg: Option<f64>,
    /// Landmarks sampled per image during training.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Sampling grid cell size in pixels (training and inference).
    #[arg(long, global = true)]
    cell_px: Option<usize>,
    /// Training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Directory of keypoint CSVs for compare-baseline to reuse instead of
    /// running the detector.
    #[arg(long, global = true, value_name = "DIR")]
    import_keypoints: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize textured image pairs with known transforms.
    MakePairs,
    /// Train the matcher and write checkpoints plus a JSONL log.
    Train,
    /// Match every pair with the trained model (one CSV per pair).
    Infer,
    /// Score stored match sets against the known transforms.
    Evaluate,
    /// Evaluate the model and the classical baseline side by side.
    CompareBaseline,
    /// Render cumulative error curves from the latest report.
    Plot,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version arrive here as "errors" but are not.
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let overrides = config::Overrides {
        output_dir: cli.output_dir,
        seed: cli.seed,
        epochs: cli.epochs,
        k: cli.k,
        cell_px: cli.cell_px,
        m_pos: cli.m_pos,
        m_neg: cli.m_neg,
        thresh_landmark: cli.thresh_landmark,
    };
    let cfg = config::load(cli.config.as_deref(), &overrides)?;
    init_threads(cli.jobs)?;

    let rd = rundir::RunDir::create(&cfg.output_dir)?;
    config::write_effective(&cfg, rd.root())?;

    match cli.command {
        Command::MakePairs => pairs::make_pairs(&cfg, &rd),
        Command::Train => commands::train_cmd(&cfg, &rd),
        Command::Infer => commands::infer_cmd(&cfg, &rd),
        Command::Evaluate => commands::evaluate_cmd(&cfg, &rd),
        Command::CompareBaseline => {
            commands::compare_cmd(&cfg, &rd, cli.import_keypoints.as_deref())
        }
        Command::Plot => commands::plot_cmd(&rd),
    }
}

/// `--jobs N` pins the global thread pool; otherwise the
/// `LANDMATCH_NUM_THREADS` environment variable applies. Either way results
/// are identical — the cap only bounds CPU usage.
fn init_threads(jobs: Option<usize>) -> CliResult<()> {
    match jobs {
        Some(0) => Err(usage("--jobs must be at least 1")),
        Some(n) => {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            Ok(())
        }
        None => {
            landmatch::init_thread_pool();
            Ok(())
        }
    }
}
