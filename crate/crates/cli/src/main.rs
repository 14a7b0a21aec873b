use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Multi-view transformer inpainting for streamed novel views.
#[derive(Parser, Debug)]
#[command(name = "mvinpaint", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

/// Settings shared by every command. Precedence, lowest first: built-in
/// defaults, the checkpoint's stored config, `--config`, `--set`, then the
/// dedicated flags.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Plain key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single key=value override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ablation switch; repeatable.
    #[arg(long, value_parser = ["single-cam", "no-masks", "no-temporal", "no-rope"])]
    pub ablate: Vec<String>,
    /// Context retention ratio in (0, 1].
    #[arg(long)]
    pub rho: Option<f32>,
    /// Re-encode every context frame instead of reusing cached features.
    #[arg(long)]
    pub no_cache: bool,
    /// Sequential kernels only.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic rig into a dataset directory.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a checkpoint on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Stream the dataset through a checkpoint and write every output frame.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-frame quality metrics as CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV file to write.
        #[arg(long)]
        out: PathBuf,
        /// Replace each novel view by its ground truth with an empty error mask.
        #[arg(long)]
        gt_as_input: bool,
        /// Evaluate only the held-out trailing frames.
        #[arg(long)]
        holdout_only: bool,
    },
    /// Speed and quality sweep over retention ratios as CSV.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV file to write.
        #[arg(long)]
        out: PathBuf,
        /// Repetitions per ratio; the median speed is reported.
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Command::Generate { common, out } => commands::generate(&common, &out),
        Command::Train {
            common,
            data,
            out,
            steps,
        } => commands::train(&common, &data, &out, steps),
        Command::Infer {
            common,
            data,
            checkpoint,
            out,
        } => commands::infer(&common, &data, &checkpoint, &out),
        Command::Eval {
            common,
            data,
            checkpoint,
            out,
            gt_as_input,
            holdout_only,
        } => commands::eval(&common, &data, &checkpoint, &out, gt_as_input, holdout_only),
        Command::Bench {
            common,
            data,
            checkpoint,
            out,
            reps,
        } => commands::bench(&common, &data, &checkpoint, &out, reps),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<mvinpaint::Error>().map_or(3, mvinpaint::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
