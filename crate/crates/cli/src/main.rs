//! `crossmask` command-line tool.
//!
//! Exit codes: 0 success, 2 usage or validation failure, 1 runtime failure.
//! Logs go to standard error; data only to the files named by flags.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crossmask::pseudo_mask::{MaskOp, SigmaSpec};

#[derive(Debug, Parser)]
#[command(name = "crossmask", version, about = "Cross-scribble pseudo masks and size-aware branch tooling")]
struct Cli {
    /// Seed for every random choice. Overrides seeds in config files when given.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rasterize pseudo masks for every annotation file in a directory.
    Genmask {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "mul", value_parser = parse_op)]
        op: MaskOp,
        /// σ as a fraction of each arm length, or `inf` for binary masks.
        #[arg(long, default_value = "inf", value_parser = parse_sigma)]
        sigma_ratio: SigmaSpec,
        /// Shrink every cross by this rate before rasterizing.
        #[arg(long, default_value_t = 0.0)]
        shrink: f64,
        /// Also write one combined label map per image.
        #[arg(long)]
        combine: bool,
        /// Also write each mask as a raw little-endian f32 stream (`.pmf`).
        #[arg(long)]
        raw: bool,
        /// Worker threads for per-image work (0 = all cores).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Compute per-category branch thresholds from a directory of masks.
    Calibrate {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean Dice of predicted masks against ground truth (paired by file name).
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Scribble annotation rates and pseudo-mask coverage for a manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        /// Ground-truth directory (`<image stem>.png`); without it, the
        /// manifest's `gt_mask_ref` entries are used when every item has one.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Area ratios (and relative errors when ground truth is given) of
    /// shrunk crosses.
    SimulateShrink {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        rates: Vec<f64>,
        /// Ground-truth directory (`<image stem>.png`).
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Two-stage toy training from a JSON config.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
        /// Receives `report.json` and `checkpoint.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the annotation service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        root: PathBuf,
        /// Per-category thresholds; enables `branch_index` in previews.
        #[arg(long)]
        thresholds: Option<PathBuf>,
    },
}

fn parse_op(s: &str) -> Result<MaskOp, String> {
    s.parse().map_err(|e: crossmask::pseudo_mask::PseudoMaskError| e.to_string())
}

fn parse_sigma(s: &str) -> Result<SigmaSpec, String> {
    s.parse().map_err(|e: crossmask::pseudo_mask::PseudoMaskError| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Genmask {
            annotations,
            out,
            op,
            sigma_ratio,
            shrink,
            combine,
            raw,
            jobs,
        } => commands::genmask::run(&commands::genmask::Options {
            annotations,
            out,
            op,
            sigma: sigma_ratio,
            shrink,
            combine,
            raw,
            jobs,
        }),
        Command::Calibrate { masks, out } => commands::calibrate::run(&masks, &out),
        Command::Evaluate { pred, gt, report } => commands::evaluate::run(&pred, &gt, &report),
        Command::Stats { manifest, gt, report } => commands::stats::run(&manifest, gt.as_deref(), &report),
        Command::SimulateShrink {
            annotations,
            rates,
            gt,
            report,
        } => commands::shrink::run(&annotations, &rates, gt.as_deref(), &report),
        Command::TrainToy { config, out } => commands::train::run(&config, &out, cli.seed),
        Command::Serve {
            port,
            host,
            root,
            thresholds,
        } => commands::serve::run(&host, port, &root, thresholds.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
