use serde::{Deserialize, Serialize};

use super::SolverError;
use crate::exec::Execution;
use crate::nn::InitRange;
use crate::optim::OptimConfig;

/// Which feedback structure the timestep networks realize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    /// `Z_i = φ(X_i, Y_i; θ_i)` with a trainable `Y_0`.
    #[serde(rename = "alg1")]
    StateFeedback,
    /// `u_i = φ¹(X_i)`, `Z_i = φ²(X_i)`; `Y` in the forward equation is replaced by `u`.
    #[serde(rename = "alg2")]
    ForwardFeedback,
    /// `Z^{k+1}_i = φ(X^{k+1}_i, Y^k_i, Z^k_i; θ_i)`; forward coefficients use the previous iterate.
    #[serde(rename = "alg3")]
    Picard,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [
        Algorithm::StateFeedback,
        Algorithm::ForwardFeedback,
        Algorithm::Picard,
    ];

    pub fn number(self) -> u8 {
        match self {
            Algorithm::StateFeedback => 1,
            Algorithm::ForwardFeedback => 2,
            Algorithm::Picard => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(Algorithm::StateFeedback),
            2 => Some(Algorithm::ForwardFeedback),
            3 => Some(Algorithm::Picard),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Algorithm::StateFeedback => "Alg 1",
            Algorithm::ForwardFeedback => "Alg 2",
            Algorithm::Picard => "Alg 3",
        }
    }
}

/// Initial `(Y^0, Z^0)` paths for the Picard scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialPaths {
    /// i.i.d. standard normal entries.
    #[default]
    Normal,
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// Time steps `N`.
    pub time_steps: usize,
    /// Sample paths `M`.
    pub samples: usize,
    pub max_iterations: usize,
    pub seed: u64,
    pub optimizer: OptimConfig,
    /// Stop once the unbiased variance of the last `stop_window` `Y_0`
    /// estimates falls below this value.
    pub stop_variance: Option<f64>,
    pub stop_window: usize,
    pub y0_range: InitRange,
    /// Factor applied to the He-uniform output-layer weights at initialization.
    pub output_init_scale: f64,
    /// Draw a fresh Brownian batch every iteration (Algorithms 1 and 2 only).
    pub resample_each_iter: bool,
    pub initial_paths: InitialPaths,
    /// Loss values above this count as divergence.
    pub divergence_threshold: f64,
    /// Row shards per iteration; each shard gets its own tape.
    pub shards: usize,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Picard,
            time_steps: 25,
            samples: 256,
            max_iterations: 3000,
            seed: 1,
            optimizer: OptimConfig::default(),
            stop_variance: None,
            stop_window: 1000,
            y0_range: InitRange::default(),
            output_init_scale: Self::DEFAULT_OUTPUT_INIT_SCALE,
            resample_each_iter: false,
            initial_paths: InitialPaths::Normal,
            divergence_threshold: 1e8,
            shards: 4,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub const DEFAULT_STOP_VARIANCE: f64 = 1e-7;
    pub const DEFAULT_OUTPUT_INIT_SCALE: f64 = 1.0;

    pub fn with_algorithm(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: String| Err(SolverError::Config(m));
        if self.time_steps == 0 {
            return bad("time_steps must be at least 1".into());
        }
        if self.samples == 0 {
            return bad("samples must be at least 1".into());
        }
        if self.shards == 0 {
            return bad("shards must be at least 1".into());
        }
        if self.resample_each_iter && self.algorithm == Algorithm::Picard {
            return bad("resample_each_iter is incompatible with the Picard scheme, which reuses the previous iterate's paths".into());
        }
        if let Some(v) = self.stop_variance {
            if !(v > 0.0) {
                return bad(format!("stop_variance must be positive, got {v}"));
            }
            if self.stop_window < 2 {
                return bad("stop_window must be at least 2".into());
            }
        }
        InitRange::new(self.y0_range.lo, self.y0_range.hi)
            .map_err(|e| SolverError::Config(e.to_string()))?;
        self.optimizer
            .validate()
            .map_err(|e| SolverError::Config(e.to_string()))?;
        if !(self.output_init_scale >= 0.0 && self.output_init_scale.is_finite()) {
            return bad(format!(
                "output_init_scale must be finite and non-negative, got {}",
                self.output_init_scale
            ));
        }
        if !(self.divergence_threshold > 0.0) {
            return bad("divergence_threshold must be positive".into());
        }
        Ok(())
    }

    /// Same configuration apart from the seed.
    pub fn same_experiment(&self, other: &TrainConfig) -> bool {
        let mut a = self.clone();
        a.seed = other.seed;
        a.execution = other.execution;
        &a == other
    }
}
