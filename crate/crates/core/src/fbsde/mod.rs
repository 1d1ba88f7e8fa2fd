//! Problem contract for fully-coupled FBSDEs
//!
//! ```text
//! X_t = x0 + ∫_0^t b(s, X, Y, Z) ds + ∫_0^t σ(s, X, Y, Z) dW
//! Y_t = g(X_T) + ∫_t^T f(s, X, Y, Z) ds - ∫_t^T Z dW
//! ```
//!
//! with `X ∈ R^n`, `Y ∈ R^m`, `W ∈ R^d`. Coefficients are evaluated on whole
//! sample batches: `x` is `[M, n]`, `y` is `[M, m]` and `z` is `[M, m*d]`
//! (row-major `m x d` per sample). The diffusion is `[M, n*d]`, row-major
//! `n x d` per sample.

mod problems;

pub use problems::{Example1, Example2, Example3, Example4, OracleProblem, ZeroDynamics};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Var};

#[derive(Debug, Error)]
pub enum FbsdeError {
    #[error("unknown problem '{name}'; available: {}", available.join(", "))]
    UnknownProblem {
        name: String,
        available: Vec<&'static str>,
    },
    #[error("invalid problem parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub d: usize,
}

pub type Coeff = Result<Var, DiffError>;

/// A forward-backward SDE with batch-capable coefficients built on a [`Tape`].
pub trait Fbsde: Send + Sync {
    fn name(&self) -> &str;
    fn dims(&self) -> Dims;
    fn horizon(&self) -> f64;
    fn x0(&self) -> &[f64];

    /// `b(t, x, y, z)`: `[M, n]`.
    fn drift(&self, tape: &mut Tape, t: f64, x: Var, y: Var, z: Var) -> Coeff;

    /// `σ(t, x, y, z)`: `[M, n*d]`.
    fn diffusion(&self, tape: &mut Tape, t: f64, x: Var, y: Var, z: Var) -> Coeff;

    /// `σ(t, x, y, z) ΔW`: `[M, n]`. Problems with structured diffusion
    /// (diagonal, scalar) override this to skip the dense product.
    fn diffusion_dw(&self, tape: &mut Tape, t: f64, x: Var, y: Var, z: Var, dw: Var) -> Coeff {
        let sigma = self.diffusion(tape, t, x, y, z)?;
        tape.batch_matvec(sigma, dw)
    }

    /// `f(t, x, y, z)`: `[M, m]`.
    fn generator(&self, tape: &mut Tape, t: f64, x: Var, y: Var, z: Var) -> Coeff;

    /// `g(x)`: `[M, m]`.
    fn terminal(&self, tape: &mut Tape, x: Var) -> Coeff;

    /// Closed-form `Y(t, x)` when known.
    fn explicit_y(&self, _t: f64, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Closed-form `Z(t, x)` (row-major `m x d`) when known.
    fn explicit_z(&self, _t: f64, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// `Y_0 = Y(0, x0)` when the explicit solution is known.
    fn explicit_y0(&self) -> Option<Vec<f64>> {
        self.explicit_y(0.0, self.x0())
    }
}

/// Optional overrides for the named problems.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ProblemParams {
    pub d: Option<usize>,
    pub horizon: Option<f64>,
    pub x0: Option<f64>,
}

pub const PROBLEM_NAMES: [&str; 5] = ["example1", "example2", "example3", "example4", "oracle"];

/// Builds one of the named problems; unspecified parameters take their
/// documented defaults.
pub fn problem_by_name(name: &str, p: &ProblemParams) -> Result<Box<dyn Fbsde>, FbsdeError> {
    let problem: Box<dyn Fbsde> = match name {
        "example1" => Box::new(Example1::new(p.d.unwrap_or(1), p.horizon.unwrap_or(0.5))?),
        "example2" => Box::new(Example2::new(
            p.d.unwrap_or(5),
            p.horizon.unwrap_or(Example2::DEFAULT_HORIZON),
            p.x0.unwrap_or(1.0),
        )?),
        "example3" => {
            reject_dims(name, p.d, 1)?;
            Box::new(Example3::with(
                p.horizon.unwrap_or(0.1),
                p.x0.unwrap_or(1.0),
            )?)
        }
        "example4" => Box::new(Example4::new(
            p.d.unwrap_or(10),
            p.horizon.unwrap_or(0.1),
            p.x0.unwrap_or(1.0),
        )?),
        "oracle" => {
            reject_dims(name, p.d, 1)?;
            Box::new(OracleProblem::with_horizon(p.horizon.unwrap_or(1.0))?)
        }
        _ => {
            return Err(FbsdeError::UnknownProblem {
                name: name.to_string(),
                available: PROBLEM_NAMES.to_vec(),
            })
        }
    };
    Ok(problem)
}

fn reject_dims(name: &str, d: Option<usize>, fixed: usize) -> Result<(), FbsdeError> {
    match d {
        Some(d) if d != fixed => Err(FbsdeError::InvalidParameter(format!(
            "{name} has fixed dimension {fixed}, got d={d}"
        ))),
        _ => Ok(()),
    }
}

pub(crate) fn check_horizon(t: f64) -> Result<(), FbsdeError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(FbsdeError::InvalidParameter(format!(
            "horizon must be positive, got {t}"
        )))
    }
}
