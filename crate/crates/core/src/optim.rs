//! First-order parameter updates: Adam (default) and plain gradient descent.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{GradMap, Tensor};
use crate::nn::Parameters;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("no gradient for parameter {0}")]
    MissingGradient(usize),
    #[error("non-finite gradient for parameter {key} at entry {index}")]
    NonFiniteGradient { key: usize, index: usize },
    #[error("gradient for parameter {key} has {got} values, parameter has {expected}")]
    GradientShape {
        key: usize,
        got: usize,
        expected: usize,
    },
    #[error("invalid optimizer setting: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global L2-norm clip applied to the whole gradient before the update.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }
}

/// Optimizer state: step counter plus Adam moment estimates per parameter key.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new<P: Parameters + ?Sized>(
        config: OptimConfig,
        params: &P,
    ) -> Result<Self, OptimError> {
        config.validate()?;
        let zeros = |k| Tensor::zeros(params.param(k).shape());
        let n = params.param_count();
        Ok(Self {
            config,
            step: 0,
            first: (0..n).map(zeros).collect(),
            second: (0..n).map(zeros).collect(),
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    /// Applies one update. Every key `0..params.param_count()` needs a gradient;
    /// nothing is modified if any gradient is missing or non-finite.
    pub fn apply<P: Parameters + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &GradMap,
    ) -> Result<(), OptimError> {
        let n = params.param_count();
        let mut sq_norm = 0.0;
        for key in 0..n {
            let g = grads.get(&key).ok_or(OptimError::MissingGradient(key))?;
            let expected = params.param(key).len();
            if g.len() != expected {
                return Err(OptimError::GradientShape {
                    key,
                    got: g.len(),
                    expected,
                });
            }
            if let Some(index) = g.first_non_finite() {
                return Err(OptimError::NonFiniteGradient { key, index });
            }
            sq_norm += g.data().iter().map(|v| v * v).sum::<f64>();
        }
        let clip = match self.config.clip_norm {
            Some(max) if sq_norm.sqrt() > max => max / sq_norm.sqrt(),
            _ => 1.0,
        };

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for key in 0..n {
            let g = &grads[&key];
            let p = params.param_mut(key).data_mut();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (pv, gv) in p.iter_mut().zip(g.data()) {
                        *pv -= c.learning_rate * clip * gv;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.first[key].data_mut();
                    let v = self.second[key].data_mut();
                    for (((pv, gv), mv), vv) in p.iter_mut().zip(g.data()).zip(m).zip(v) {
                        let gv = gv * clip;
                        *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                        *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                        let m_hat = *mv / bias1;
                        let v_hat = *vv / bias2;
                        *pv -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}
