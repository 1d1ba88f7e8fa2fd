//! Training loops for the three control formulations.

mod config;
mod gradcheck;
mod residual;
pub mod rollout;
mod train;

pub use config::{Algorithm, InitialPaths, TrainConfig};
pub use gradcheck::{gradcheck, GradCheckEntry, GradCheckReport};
pub use residual::{residual_check, ResidualRow};
pub use rollout::{loss_forward_feedback, loss_terminal, PicardPaths, Rollout, Trajectory};
pub use train::{derive_seed, train, Evaluation, Model, Trainer};

use thiserror::Error;

use crate::diffcore::DiffError;
use crate::fbsde::FbsdeError;
use crate::nn::NnError;
use crate::optim::OptimError;
use crate::report::RunReport;
use crate::stoch::StochError;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("problem has dimensions (n={n}, m={m}, d={d}) but x0 has {x0_len} entries")]
    DimMismatch {
        n: usize,
        m: usize,
        d: usize,
        x0_len: usize,
    },
    #[error("non-finite state at time step {step}, sample {sample}: {source}")]
    NonFiniteState {
        step: usize,
        sample: usize,
        source: DiffError,
    },
    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged {
        iteration: usize,
        reason: String,
        report: Box<RunReport>,
    },
    #[error("problem '{0}' has no explicit solution")]
    MissingExplicit(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Stoch(#[from] StochError),
    #[error(transparent)]
    Fbsde(#[from] FbsdeError),
}
