use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use fbsde_core::exec::Execution;
use fbsde_core::fbsde::ProblemParams;
use fbsde_core::nn::InitRange;
use fbsde_core::optim::OptimizerKind;
use fbsde_core::solver::{Algorithm, InitialPaths, TrainConfig};

use crate::CliError;

pub const OUT_DIR_ENV: &str = "FBSDE_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "fbsde-out";

#[derive(Debug, Parser)]
#[command(
    name = "fbsde",
    version,
    about = "Deep-learning solvers for fully coupled FBSDEs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train once and write the run files.
    Run(TrainArgs),
    /// Train R times with seeds seed, seed+1, ... and write a summary table.
    Repeat(TrainArgs),
    /// Euler-simulate a problem with its explicit solution plugged in and report terminal residuals.
    ResidualCheck(ResidualArgs),
    /// Compare the training-loss gradient with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecArg {
    Sequential,
    Parallel,
}

#[derive(Debug, Clone, Copy, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialPathsArg {
    Normal,
    Zeros,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ProblemArgs {
    /// example1, example2, example3, example4 or oracle.
    #[arg(long)]
    pub problem: Option<String>,
    /// Brownian (and state) dimension.
    #[arg(long = "d")]
    pub d: Option<usize>,
    /// Time horizon.
    #[arg(long = "T")]
    pub horizon: Option<f64>,
    /// Initial state, repeated in every coordinate.
    #[arg(long = "x0", allow_negative_numbers = true)]
    pub x0: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// 1: state feedback, 2: forward feedback, 3: Picard.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub algorithm: Option<u8>,
    /// Maximum training iterations.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Brownian sample paths M.
    #[arg(long)]
    pub paths: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    /// Clip the global gradient norm to this value.
    #[arg(long)]
    pub clip: Option<f64>,
    /// Time steps N.
    #[arg(long = "N")]
    pub time_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of runs (repeat only).
    #[arg(long)]
    pub repeat: Option<usize>,
    /// Explicit comma-separated seeds for repeat; they must all differ.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Output directory (default: $FBSDE_OUT_DIR, then ./fbsde-out).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Stop when the variance of the trailing Y0 estimates drops below this value
    /// (1e-7 when given without a value).
    #[arg(long = "stop-var", num_args = 0..=1, default_missing_value = "1e-7")]
    pub stop_var: Option<f64>,
    #[arg(long = "stop-window")]
    pub stop_window: Option<usize>,
    /// Draw a new Brownian batch every iteration (algorithms 1 and 2).
    #[arg(long)]
    pub resample: bool,
    /// Initialization interval of the trainable Y0, as "lo,hi".
    #[arg(
        long = "y0-range",
        value_delimiter = ',',
        allow_negative_numbers = true
    )]
    pub y0_range: Option<Vec<f64>>,
    /// Factor applied to the output-layer weights at initialization.
    #[arg(long = "output-scale")]
    pub output_scale: Option<f64>,
    /// Initial previous-iterate paths for the Picard scheme.
    #[arg(long = "initial-paths", value_enum)]
    pub initial_paths: Option<InitialPathsArg>,
    /// Row shards evaluated per iteration.
    #[arg(long)]
    pub shards: Option<usize>,
    #[arg(long, value_enum)]
    pub execution: Option<ExecArg>,
    /// Comma-separated iterations at which repeat reports Y0 statistics.
    #[arg(long, value_delimiter = ',')]
    pub checkpoints: Option<Vec<usize>>,
    /// TOML file with any of the settings above; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ResidualArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Comma-separated time-step counts.
    #[arg(long = "N", value_delimiter = ',', default_value = "25,50,100")]
    pub steps: Vec<usize>,
    #[arg(long, default_value_t = 4096)]
    pub paths: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Algorithm to check; all three when omitted.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub algorithm: Option<u8>,
    #[arg(long = "N", default_value_t = 3)]
    pub time_steps: usize,
    #[arg(long, default_value_t = 4)]
    pub paths: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Largest number of parameter entries to perturb per algorithm.
    #[arg(long = "max-entries")]
    pub max_entries: Option<usize>,
    /// Relative error above which the check fails.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

/// Contents of a `--config` file. Keys mirror the long flag names.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    problem: Option<String>,
    d: Option<usize>,
    #[serde(rename = "T")]
    horizon: Option<f64>,
    x0: Option<f64>,
    algorithm: Option<u8>,
    steps: Option<usize>,
    paths: Option<usize>,
    lr: Option<f64>,
    optimizer: Option<OptimizerArg>,
    clip: Option<f64>,
    #[serde(rename = "N")]
    time_steps: Option<usize>,
    seed: Option<u64>,
    repeat: Option<usize>,
    seeds: Option<Vec<u64>>,
    out: Option<PathBuf>,
    #[serde(rename = "stop-var")]
    stop_var: Option<f64>,
    #[serde(rename = "stop-window")]
    stop_window: Option<usize>,
    resample: Option<bool>,
    #[serde(rename = "y0-range")]
    y0_range: Option<Vec<f64>>,
    #[serde(rename = "output-scale")]
    output_scale: Option<f64>,
    #[serde(rename = "initial-paths")]
    initial_paths: Option<InitialPathsArg>,
    shards: Option<usize>,
    execution: Option<ExecArg>,
    checkpoints: Option<Vec<usize>>,
}

/// Everything a training command needs after merging flags, file and defaults.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub problem: String,
    pub params: ProblemParams,
    pub train: TrainConfig,
    pub repeat: usize,
    pub seeds: Option<Vec<u64>>,
    pub out: PathBuf,
    pub checkpoints: Option<Vec<usize>>,
}

pub fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn read_file_config(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn algorithm(n: u8) -> Result<Algorithm, CliError> {
    Algorithm::from_number(n)
        .ok_or_else(|| CliError::Usage(format!("--algorithm must be 1, 2 or 3, got {n}")))
}

impl TrainArgs {
    pub fn resolve(self) -> Result<Resolved, CliError> {
        let file = match &self.config {
            Some(path) => read_file_config(path)?,
            None => FileConfig::default(),
        };
        let mut train = TrainConfig::default();
        if let Some(a) = self.algorithm.or(file.algorithm) {
            train.algorithm = algorithm(a)?;
        }
        if let Some(v) = self.steps.or(file.steps) {
            train.max_iterations = v;
        }
        if let Some(v) = self.paths.or(file.paths) {
            train.samples = v;
        }
        if let Some(v) = self.lr.or(file.lr) {
            train.optimizer.learning_rate = v;
        }
        if let Some(o) = self.optimizer.or(file.optimizer) {
            train.optimizer.kind = match o {
                OptimizerArg::Adam => OptimizerKind::Adam,
                OptimizerArg::Sgd => OptimizerKind::Sgd,
            };
        }
        train.optimizer.clip_norm = self.clip.or(file.clip);
        if let Some(v) = self.time_steps.or(file.time_steps) {
            train.time_steps = v;
        }
        if let Some(v) = self.seed.or(file.seed) {
            train.seed = v;
        }
        train.stop_variance = self.stop_var.or(file.stop_var);
        if let Some(v) = self.stop_window.or(file.stop_window) {
            train.stop_window = v;
        }
        train.resample_each_iter = self.resample || file.resample.unwrap_or(false);
        if let Some(r) = self.y0_range.or(file.y0_range) {
            let [lo, hi] = r[..] else {
                return Err(CliError::Usage(
                    "--y0-range takes exactly two numbers, lo,hi".into(),
                ));
            };
            train.y0_range = InitRange::new(lo, hi).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        if let Some(v) = self.output_scale.or(file.output_scale) {
            train.output_init_scale = v;
        }
        if let Some(p) = self.initial_paths.or(file.initial_paths) {
            train.initial_paths = match p {
                InitialPathsArg::Normal => InitialPaths::Normal,
                InitialPathsArg::Zeros => InitialPaths::Zeros,
            };
        }
        if let Some(v) = self.shards.or(file.shards) {
            train.shards = v;
        }
        if let Some(e) = self.execution.or(file.execution) {
            train.execution = match e {
                ExecArg::Sequential => Execution::Sequential,
                ExecArg::Parallel => Execution::Parallel,
            };
        }
        train
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;

        let p = self.problem;
        Ok(Resolved {
            problem: p
                .problem
                .or(file.problem)
                .unwrap_or_else(|| "example3".into()),
            params: ProblemParams {
                d: p.d.or(file.d),
                horizon: p.horizon.or(file.horizon),
                x0: p.x0.or(file.x0),
            },
            train,
            repeat: self.repeat.or(file.repeat).unwrap_or(10),
            seeds: self.seeds.or(file.seeds),
            out: out_dir(self.out.or(file.out)),
            checkpoints: self.checkpoints.or(file.checkpoints),
        })
    }
}

impl ProblemArgs {
    pub fn params(&self) -> ProblemParams {
        ProblemParams {
            d: self.d,
            horizon: self.horizon,
            x0: self.x0,
        }
    }
}
