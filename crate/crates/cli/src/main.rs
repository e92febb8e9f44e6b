//! `uasnet`: batch workflows for uncertainty-aware lung nodule segmentation.

mod commands;
mod errors;

use clap::{ArgAction, Parser, Subcommand};
use std::path::PathBuf;

use errors::CliError;

#[derive(Parser)]
#[command(
    name = "uasnet",
    about = "Uncertainty-aware lung nodule segmentation: phantom data, training, prediction, HU-density analysis",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic nodule phantom dataset in the portable format.
    Generate {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples to write.
        #[arg(long)]
        count: usize,
        /// Base seed; sample k derives its own stream from seed + k.
        #[arg(long, default_value_t = 17)]
        seed: u64,
        /// Patch edge length in pixels (divisible by 32).
        #[arg(long, default_value_t = 64)]
        patch_size: usize,
        /// Phantom profile: `default` or `lc-heavy` (wider disagreement ring).
        #[arg(long, default_value = "default")]
        profile: String,
        /// Keep exact benign/malignant balance (count must be even).
        #[arg(long, action = ArgAction::SetTrue)]
        balanced: bool,
        /// Disable cavitated nodules.
        #[arg(long, action = ArgAction::SetTrue)]
        no_cavity: bool,
        /// Disable spiculated nodules (all samples become benign).
        #[arg(long, action = ArgAction::SetTrue)]
        no_spiculation: bool,
        /// Collapse every annotator onto one threshold (HU): identical masks.
        #[arg(long)]
        zero_jitter: Option<f32>,
    },
    /// Train per the declarative config: five-fold CV or a single fold,
    /// with idempotent resume from the run directory.
    Train {
        /// TOML training configuration.
        #[arg(long)]
        config: PathBuf,
        /// Dataset root (overrides the config).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Parent directory for run outputs (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Enable the joint adversarial process.
        #[arg(long, action = ArgAction::SetTrue, conflicts_with = "no_jap")]
        jap: bool,
        /// Disable the joint adversarial process.
        #[arg(long, action = ArgAction::SetTrue)]
        no_jap: bool,
        /// FA-Cat skip levels, comma separated (0 = highest resolution).
        #[arg(long, value_delimiter = ',')]
        fa_cat_placement: Option<Vec<usize>>,
    },
    /// Run one sample through a checkpoint and write the predicted and
    /// standard maps (PNG + raw f32).
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample directory (meta.json + image.f32 [+ masks]).
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Kernel-density analysis of HU values inside the high/low-confidence
    /// regions, real and (with a checkpoint) predicted.
    AnalyzeHu {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// KDE bandwidth in HU (default: Silverman's rule).
        #[arg(long)]
        bandwidth: Option<f64>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version print normally; anything else is a usage error
            if e.use_stderr() {
                eprintln!("error[E1]: {}", one_line(&e.to_string()));
                std::process::exit(1);
            }
            let _ = e.print();
            std::process::exit(0);
        }
    };
    let result = match cli.command {
        Command::Generate {
            out,
            count,
            seed,
            patch_size,
            profile,
            balanced,
            no_cavity,
            no_spiculation,
            zero_jitter,
        } => commands::generate(commands::GenerateArgs {
            out,
            count,
            seed,
            patch_size,
            profile,
            balanced,
            no_cavity,
            no_spiculation,
            zero_jitter,
        }),
        Command::Train {
            config,
            dataset,
            out,
            seed,
            jap,
            no_jap,
            fa_cat_placement,
        } => commands::train(commands::TrainArgs {
            config,
            dataset,
            out,
            seed,
            jap: if jap {
                Some(true)
            } else if no_jap {
                Some(false)
            } else {
                None
            },
            fa_cat_placement,
        }),
        Command::Predict {
            checkpoint,
            sample,
            out,
        } => commands::predict(&checkpoint, &sample, &out),
        Command::AnalyzeHu {
            dataset,
            checkpoint,
            out,
            bandwidth,
        } => commands::analyze_hu(&dataset, checkpoint.as_deref(), &out, bandwidth),
    };
    match result {
        Ok(artifacts) => {
            println!("ok: {} artifacts written", artifacts.len());
        }
        Err(err) => {
            eprintln!("error[E{}]: {}", err.code, one_line(&err.message));
            std::process::exit(err.code);
        }
    }
}

fn one_line(s: &str) -> String {
    s.replace('\n', " | ")
}

impl From<CliError> for i32 {
    fn from(e: CliError) -> i32 {
        e.code
    }
}
