//! `sonoseg`: dataset preparation, generator training and sampling,
//! segmentation training, evaluation, reporting and overlay rendering.
//!
//! Exit status: 0 success, 2 configuration error, 3 data or file error,
//! 4 numerical abort, 1 anything else.

mod commands;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sonoseg::config::{Averaging, TrainMode};
use sonoseg::Error;

#[derive(Parser)]
#[command(name = "sonoseg", version, about = "Semi-supervised ultrasound lesion segmentation")]
#[command(after_help = "Every command reads one TOML configuration (see `sonoseg config`). \
Flags given on the command line override values from the file.\n\n\
Exit status: 0 success, 2 configuration error, 3 data or file error, 4 numerical abort.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArg {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Start from a named preset instead of the library defaults.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Preset {
    /// Full-size network, 256x256 inputs.
    Full,
    /// Narrow network, 64x64 inputs, short schedules.
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Mgcc,
    Supervised,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Mgcc => TrainMode::Mgcc,
            ModeArg::Supervised => TrainMode::Supervised,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum AveragingArg {
    Macro,
    Micro,
}

impl From<AveragingArg> for Averaging {
    fn from(a: AveragingArg) -> Self {
        match a {
            AveragingArg::Macro => Averaging::Macro,
            AveragingArg::Micro => Averaging::Micro,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SplitPart {
    Train,
    Val,
    Labeled,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Select {
    /// Highest validation IoU in the log.
    Best,
    /// Last validation row in the log.
    Last,
}

#[derive(Subcommand)]
enum Command {
    /// Print a complete configuration file.
    Config {
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Write split manifests for a dataset directory, or generate a toy dataset first.
    Prepare {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Existing dataset directory (images with `<stem>_mask` files).
        #[arg(long, conflicts_with = "toy", required_unless_present = "toy")]
        input: Option<PathBuf>,
        /// Generate this many toy images into `--out`.
        #[arg(long)]
        toy: Option<usize>,
        /// Output directory: toy images go here, manifests under `<out>/splits`.
        #[arg(long)]
        out: PathBuf,
        /// Fraction of images in each training split (data.train_ratio).
        #[arg(long)]
        train_ratio: Option<f64>,
        /// Fraction of each training split that keeps its masks.
        #[arg(long)]
        labeled_fraction: Option<f64>,
        /// Number of independent splits to write.
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Train the segmentation network.
    TrainSeg {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Dataset directory (overrides data.root).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Which repeated split to train on (data.split_index).
        #[arg(long)]
        split: Option<usize>,
        /// Extra unlabeled images, e.g. the output of `generate`.
        #[arg(long)]
        extra_unlabeled: Option<PathBuf>,
        /// Manifest selecting ids from `--extra-unlabeled`.
        #[arg(long)]
        pool: Option<PathBuf>,
        /// Run directory (overrides run.output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the VAE image compressor.
    TrainVae {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Checkpoint path; `<run.output_dir>/ldm/vae.ckpt` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the latent denoiser on VAE encodings of the training images.
    TrainLdm {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// VAE checkpoint; `<run.output_dir>/ldm/vae.ckpt` by default.
        #[arg(long)]
        vae: Option<PathBuf>,
        /// Checkpoint path; `<run.output_dir>/ldm/denoiser.ckpt` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample synthetic unlabeled images.
    Generate {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Number of images.
        #[arg(long)]
        n: Option<usize>,
        /// DDIM steps.
        #[arg(long)]
        steps: Option<usize>,
        /// DDIM noise scale; 0 is deterministic.
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        denoiser: Option<PathBuf>,
        /// Image directory; `<run.output_dir>/ldm/synthetic` by default.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pool manifest that receives the new ids; `<out>/pool.txt` by default.
        #[arg(long)]
        pool: Option<PathBuf>,
    },
    /// Score a checkpoint on one part of a split.
    Eval {
        /// Segmentation checkpoint, e.g. `<run>/ckpt_best`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Configuration for data paths; the checkpoint's own when omitted.
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitPart,
        #[arg(long)]
        split_index: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_enum)]
        averaging: Option<AveragingArg>,
    },
    /// Mean and sample standard deviation of validation scores over runs.
    Report {
        /// Run directories, each holding a `log.csv`.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "runs")]
        label: String,
        #[arg(long, value_enum, default_value = "best")]
        select: Select,
        /// Print CSV instead of a table.
        #[arg(long)]
        csv: bool,
    },
    /// Write input | ground truth | prediction panels for a directory of images.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset-style directory; masks are optional.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::ConfigMismatch(_) => 2,
        Error::Io { .. } | Error::Item { .. } | Error::Data(_) | Error::Checkpoint(_) | Error::Version { .. } => 3,
        Error::NonFinite(_) => 4,
        Error::Tensor(_) | Error::Invalid(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Config { cfg } => commands::config(&cfg),
        Command::Prepare {
            cfg,
            input,
            toy,
            out,
            train_ratio,
            labeled_fraction,
            repeats,
        } => commands::prepare(&cfg, input, toy, &out, train_ratio, labeled_fraction, repeats),
        Command::TrainSeg {
            cfg,
            mode,
            epochs,
            data,
            split,
            extra_unlabeled,
            pool,
            out,
            resume,
        } => commands::train_seg(
            &cfg,
            commands::SegOverrides {
                mode: mode.map(Into::into),
                epochs,
                data,
                split,
                extra_unlabeled,
                pool,
                out,
            },
            resume,
        ),
        Command::TrainVae { cfg, data, epochs, out } => commands::train_vae(&cfg, data, epochs, out),
        Command::TrainLdm {
            cfg,
            data,
            epochs,
            vae,
            out,
        } => commands::train_ldm(&cfg, data, epochs, vae, out),
        Command::Generate {
            cfg,
            n,
            steps,
            eta,
            vae,
            denoiser,
            out,
            pool,
        } => commands::generate(&cfg, n, steps, eta, vae, denoiser, out, pool),
        Command::Eval {
            ckpt,
            config,
            data,
            split,
            split_index,
            threshold,
            averaging,
        } => commands::eval(
            &ckpt,
            config,
            data,
            split,
            split_index,
            threshold,
            averaging.map(Into::into),
        ),
        Command::Report {
            runs,
            label,
            select,
            csv,
        } => commands::report(&runs, &label, select, csv),
        Command::Render {
            ckpt,
            images,
            out,
            threshold,
        } => render::render(&ckpt, &images, &out, threshold),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
