use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;

/// Edge detection pipeline: augment, train, infer, eval.
#[derive(Parser)]
#[command(name = "edge", version)]
struct Cli {
    /// Run configuration (`key = value` lines); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Expand every manifest entry into its augmented variants.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a manifest, checkpointing periodically.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Loss CSV; defaults to the checkpoint path with a `.loss.csv` extension.
        #[arg(long)]
        loss_log: Option<PathBuf>,
        /// Continue from `--checkpoint` instead of initializing.
        #[arg(long)]
        resume: bool,
    },
    /// Write edge maps for PNG files or directories of them.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the six side maps.
        #[arg(long)]
        side_maps: bool,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Score predictions against ground truth; prints ODS, OIS and AP.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pr_csv: Option<PathBuf>,
    },
    /// Write the precision/recall curve CSV only.
    PrExport {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> edgemix::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Augment { manifest, out } => commands::augment(&cfg, &manifest, &out),
        Command::Train {
            data,
            checkpoint,
            loss_log,
            resume,
        } => commands::train(
            &cfg,
            commands::TrainPaths {
                data: &data,
                checkpoint: &checkpoint,
                loss_log: loss_log.as_deref(),
                resume,
            },
        ),
        Command::Infer {
            checkpoint,
            out,
            side_maps,
            images,
        } => commands::infer(&checkpoint, &images, &out, side_maps),
        Command::Eval { pred, gt, pr_csv } => commands::eval(&cfg, &pred, &gt, pr_csv.as_deref()),
        Command::PrExport { pred, gt, out } => commands::pr_export(&cfg, &pred, &gt, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
