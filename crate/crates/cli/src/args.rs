use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

#[derive(Debug, Parser)]
#[command(name = "elf", version, about = "Exact-Lipschitz autoregressive flows")]
pub struct Cli {
    /// Worker threads (falls back to ELF_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a flow and write a checkpoint.
    Train(TrainArgs),
    /// Mean log-likelihood per split.
    Eval(EvalArgs),
    /// Draw samples by fixed-point inversion.
    Sample(SampleArgs),
    /// Log-density on a regular 2-D grid, as CSV.
    DensityGrid(GridArgs),
    /// Run the oracle suite.
    Check(CheckArgs),
    /// Time the Lipschitz computation over hidden sizes and batch sizes.
    Bench(BenchArgs),
}

/// Training flags. Every field may also come from `--config FILE` (TOML,
/// same names with underscores); flags win over the file.
#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// TOML file with defaults for any of the flags below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// eight-gaussians, checkerboard or csv.
    #[arg(long)]
    pub dataset: Option<String>,

    /// Numeric CSV file (implies --dataset csv).
    #[arg(long)]
    pub csv: Option<PathBuf>,

    /// Train/validation/test fractions for CSV data.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<f64>>,

    /// Skip per-column standardization of CSV data.
    #[arg(long)]
    pub no_standardize: bool,

    #[arg(long)]
    pub flows: Option<usize>,

    #[arg(long)]
    pub elf_hidden: Option<usize>,

    /// Hypernetwork hidden widths, e.g. 128,128,128,128.
    #[arg(long, value_delimiter = ',')]
    pub hypernet_hidden: Option<Vec<usize>>,

    /// felu or relu.
    #[arg(long)]
    pub activation: Option<String>,

    #[arg(long)]
    pub steps: Option<usize>,

    #[arg(long)]
    pub batch: Option<usize>,

    #[arg(long)]
    pub lr: Option<f64>,

    /// constant, halve:K or plateau:PATIENCE.
    #[arg(long)]
    pub lr_schedule: Option<String>,

    /// Gradient clip threshold; 0 disables clipping.
    #[arg(long)]
    pub grad_clip: Option<f64>,

    /// norm or elementwise.
    #[arg(long)]
    pub clip_mode: Option<String>,

    #[arg(long)]
    pub weight_decay: Option<f64>,

    /// Target Lipschitz bound of each ELF layer.
    #[arg(long)]
    pub kappa: Option<f64>,

    /// Normalize to Lipschitz constant exactly 1.
    #[arg(long)]
    pub paper_faithful: bool,

    /// Treat the normalization scale as a constant in the gradient.
    #[arg(long)]
    pub detach_lipschitz: bool,

    /// Polyak averaging decay.
    #[arg(long, num_args = 0..=1, default_missing_value = "0.999")]
    pub polyak: Option<f64>,

    /// Stop after this many validation checks without improvement.
    #[arg(long)]
    pub early_stop: Option<usize>,

    /// Steps between validation checks.
    #[arg(long)]
    pub eval_every: Option<usize>,

    /// Points per split for the final summary on synthetic data.
    #[arg(long)]
    pub eval_points: Option<usize>,

    #[arg(long)]
    pub seed: Option<u64>,

    /// Checkpoint path; metrics go to `<out>.metrics.jsonl`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,

    /// Evaluate every row of this CSV file instead of the training splits.
    #[arg(long)]
    pub data: Option<PathBuf>,

    /// Points per split for synthetic data.
    #[arg(short = 'n', long, default_value_t = 10_000)]
    pub n: usize,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,

    #[arg(short = 'n', long, default_value_t = 1000)]
    pub n: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[command(flatten)]
    pub fp: FpArgs,

    /// Output CSV (stdout if absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FpArgs {
    #[arg(long, default_value_t = 1e-8)]
    pub fp_tol: f64,

    #[arg(long, default_value_t = 200)]
    pub fp_max_iters: usize,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub model: PathBuf,

    /// Half-width `R` for [−R, R]², or `LO,HI`.
    #[arg(long, default_value = "4", allow_hyphen_values = true)]
    pub range: String,

    /// Points per axis.
    #[arg(long, default_value_t = 200)]
    pub resolution: usize,

    /// Output CSV (stdout if absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Checkpoint to check in addition to the construction tests.
    #[arg(long)]
    pub model: Option<PathBuf>,

    /// Also check a randomly initialized and perturbed model.
    #[arg(long)]
    pub random: bool,

    /// Dimension of the random model.
    #[arg(long, default_value_t = 3)]
    pub dims: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Test points for the round-trip oracle.
    #[arg(long, default_value_t = 256)]
    pub points: usize,

    #[command(flatten)]
    pub fp: FpArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128,256,512")]
    pub hidden: Vec<usize>,

    /// Batch size for the hidden-size sweep.
    #[arg(long, default_value_t = 256)]
    pub batch: usize,

    #[arg(long, value_delimiter = ',', default_value = "64,128,256,512,1024")]
    pub batch_sizes: Vec<usize>,

    /// Hidden size for the batch sweep.
    #[arg(long, default_value_t = 128)]
    pub batch_hidden: usize,

    #[arg(long, default_value_t = 7)]
    pub reps: usize,
}

/// Parses `R` as `(−R, R)` or `LO,HI`.
pub fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let bad = || format!("invalid range `{s}`: expected R or LO,HI");
    let (lo, hi) = match s.split_once(',') {
        Some((a, b)) => (
            a.trim().parse::<f64>().map_err(|_| bad())?,
            b.trim().parse::<f64>().map_err(|_| bad())?,
        ),
        None => {
            let r = s.trim().parse::<f64>().map_err(|_| bad())?;
            (-r, r)
        }
    };
    if lo < hi && lo.is_finite() && hi.is_finite() {
        Ok((lo, hi))
    } else {
        Err(bad())
    }
}
