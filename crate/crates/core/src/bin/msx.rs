use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use msx::backbone::Profile;
use msx::harness::commands;

#[derive(Parser)]
#[command(
    name = "msx",
    version,
    about = "Lung segmentation and multi-scale attention classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic lung/opacity dataset with manifests.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "desk")]
        profile: Profile,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the segmentation network over the configured seeds.
    SegTrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Predict lung masks for every image of a manifest.
    SegPredict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Train the classifier over the configured seeds.
    ClsTrain {
        #[arg(long)]
        config: PathBuf,
        /// Directory of precomputed masks (from `seg-predict`).
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Evaluate a classifier checkpoint on a manifest.
    ClsEval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Run every cell of an ablation grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a machine-readable report as text.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Synth {
            n,
            profile,
            seed,
            out,
        } => commands::synth(*n, *profile, *seed, out),
        Command::SegTrain { config } => commands::seg_train(config),
        Command::SegPredict {
            ckpt,
            manifest,
            out,
            threshold,
        } => commands::seg_predict(ckpt, manifest, out, *threshold),
        Command::ClsTrain { config, masks } => commands::cls_train(config, masks.as_deref()),
        Command::ClsEval {
            ckpt,
            manifest,
            masks,
        } => commands::cls_eval(ckpt, manifest, masks.as_deref()),
        Command::Ablate { grid, out } => commands::ablate_grid(grid, out.as_deref()),
        Command::Report { input } => commands::report(input),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("msx: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
