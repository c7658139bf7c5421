use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use symflow::signal::SignalKind;

#[derive(Debug, Parser)]
#[command(name = "symflow", version, about = "Shift-invariant embeddings and flows for likelihood-free inference")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; defaults for `--model` when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum)]
    pub model: Option<Model>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Model {
    Sho,
    Sg,
}

impl From<Model> for SignalKind {
    fn from(m: Model) -> Self {
        match m {
            Model::Sho => SignalKind::Sho,
            Model::Sg => SignalKind::Sg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Role {
    Pretrain,
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset file.
    Simulate {
        #[arg(long, value_enum, default_value = "train")]
        role: Role,
        /// Number of records (default from the configuration).
        #[arg(long)]
        n: Option<usize>,
        /// Noise level override.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Self-supervised pretraining of the encoder on shifted pairs.
    Pretrain {
        /// Pair dataset; simulated from the configuration when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train the flow on the frozen pretrained embedding.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Embedding checkpoint written by `pretrain`.
        #[arg(long)]
        embedding: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train the raw-data baseline flow from scratch.
    TrainBaseline {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Posterior samples for one series.
    Infer {
        /// Flow checkpoint from `train` or `train-baseline`.
        #[arg(long)]
        flow: PathBuf,
        /// Dataset file holding the series.
        #[arg(long, conflicts_with = "simulate_truth")]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Simulate a noisy series from these two parameters instead.
        #[arg(long, value_delimiter = ',', num_args = 1)]
        simulate_truth: Option<Vec<f64>>,
        /// Shift in samples for `--simulate-truth`.
        #[arg(long, default_value_t = 0)]
        shift: usize,
        #[arg(long)]
        n_samples: Option<usize>,
        /// Compare against the grid posterior and the Cramér-Rao widths.
        #[arg(long)]
        oracle: bool,
    },
    /// P-P calibration over simulated test instances.
    Calibrate {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        n_instances: Option<usize>,
        #[arg(long)]
        n_samples: Option<usize>,
    },
    /// Cramér-Rao widths at a parameter point.
    Crb {
        #[arg(long, value_delimiter = ',', num_args = 1, required = true)]
        params: Vec<f64>,
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Parameter and MAC counts of model checkpoints.
    Complexity {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        batch: usize,
    },
    /// Re-check every manifest checksum in the output directory.
    Verify,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Pretrain { .. } => "pretrain",
            Command::Train { .. } => "train",
            Command::TrainBaseline { .. } => "train-baseline",
            Command::Infer { .. } => "infer",
            Command::Calibrate { .. } => "calibrate",
            Command::Crb { .. } => "crb",
            Command::Complexity { .. } => "complexity",
            Command::Verify => "verify",
        }
    }
}
