use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ddpmcd::config::Profile;

#[derive(Debug, Parser)]
#[command(name = "ddpmcd", version, about = "Change detection from diffusion-model features")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config file; values override the profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in profile the config starts from.
    #[arg(long, global = true, value_enum)]
    pub profile: Option<ProfileArg>,
    /// Override any config value, e.g. `--set head.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Use a manifest dataset (A/, B/, label/, split lists) at this root.
    #[arg(long, global = true)]
    pub data_root: Option<PathBuf>,
    /// Parent of the timestamped run directory [env: DDPMCD_OUTPUT_ROOT].
    #[arg(long, global = true)]
    pub output_root: Option<PathBuf>,
    /// Exact run directory instead of a timestamped one.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Debug-level logging.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProfileArg {
    Desk,
    Full,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Full => Profile::Full,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the denoiser on the synthetic pretraining corpus.
    Pretrain {
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Write generated images as PNGs with their channel statistics.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        n: Option<usize>,
    },
    /// Cache the features of one pair and write channel-mean PNGs.
    ExtractFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Pair id, or its index within the split.
        #[arg(long, default_value = "0")]
        pair: String,
    },
    /// Train the change head on frozen features.
    TrainCd {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        epochs: Option<u64>,
        /// Timesteps on the 1000-step scale, e.g. `50,100,400`.
        #[arg(long)]
        timesteps: Option<String>,
    },
    /// Dataset-level metrics of a trained head, or of saved predictions.
    Eval {
        #[arg(long, requires = "head")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        head: Option<PathBuf>,
        /// Directory of predicted mask PNGs named like the labels.
        #[arg(long, conflicts_with_all = ["checkpoint", "head"])]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train one head per timestep set and compare them on the test split.
    AblateTimesteps {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sets separated by `;`, timesteps by `,`, e.g. `50;100;50,100,400`.
        #[arg(long)]
        tsets: Option<String>,
        #[arg(long)]
        epochs: Option<u64>,
    },
    /// Write the configured synthetic dataset in manifest layout.
    MakeDataset,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Pretrain { .. } => "pretrain",
            Command::Sample { .. } => "sample",
            Command::ExtractFeatures { .. } => "extract-features",
            Command::TrainCd { .. } => "train-cd",
            Command::Eval { .. } => "eval",
            Command::AblateTimesteps { .. } => "ablate-timesteps",
            Command::MakeDataset => "make-dataset",
        }
    }
}
