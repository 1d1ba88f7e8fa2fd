//! Finite-difference check of the full training-loss gradient.

use super::{Algorithm, SolverError, TrainConfig, Trainer};
use crate::fbsde::Fbsde;
use crate::nn::Parameters;

const STEP: f64 = 1e-6;
const FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckEntry {
    pub key: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`.
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub algorithm: Algorithm,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }
}

/// Compares the reverse-mode gradient of the loss at initialization against
/// central differences with step `1e-6`. With `max_entries`, entries are
/// taken at an even stride through the flattened parameter list; the
/// trainable `Y_0` (when present) is always included.
pub fn gradcheck(
    problem: &dyn Fbsde,
    config: &TrainConfig,
    max_entries: Option<usize>,
) -> Result<GradCheckReport, SolverError> {
    let mut trainer = Trainer::new(problem, config.clone())?;
    let eval = trainer.evaluate(true)?;

    let mut all: Vec<(usize, usize)> = Vec::new();
    let model = trainer.model();
    for key in 0..model.param_count() {
        for index in 0..model.param(key).len() {
            all.push((key, index));
        }
    }
    let chosen: Vec<(usize, usize)> = match max_entries {
        Some(cap) if cap < all.len() => {
            let mut picked: Vec<_> = (0..cap).map(|k| all[k * all.len() / cap]).collect();
            let y0_key = match model {
                super::Model::StateFeedback(s) | super::Model::Picard(s) => s.y0_key(),
                super::Model::ForwardFeedback { .. } => None,
            };
            if let Some(key) = y0_key {
                if !picked.iter().any(|&(k, _)| k == key) {
                    picked.push((key, 0));
                }
            }
            picked
        }
        _ => all,
    };

    let mut entries = Vec::with_capacity(chosen.len());
    for (key, index) in chosen {
        let original = trainer.model().param(key).data()[index];
        trainer.model_mut().param_mut(key).data_mut()[index] = original + STEP;
        let up = trainer.evaluate(false)?.loss;
        trainer.model_mut().param_mut(key).data_mut()[index] = original - STEP;
        let down = trainer.evaluate(false)?.loss;
        trainer.model_mut().param_mut(key).data_mut()[index] = original;
        let numeric = (up - down) / (2.0 * STEP);
        let analytic = eval.grads[&key].data()[index];
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        entries.push(GradCheckEntry {
            key,
            index,
            analytic,
            numeric,
            rel_error,
        });
    }
    Ok(GradCheckReport {
        algorithm: config.algorithm,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbsde::Example3;

    #[test]
    fn capped_check_includes_y0() {
        let p = Example3::new();
        let c = TrainConfig {
            algorithm: Algorithm::StateFeedback,
            time_steps: 2,
            samples: 3,
            ..TrainConfig::default()
        };
        let r = gradcheck(&p, &c, Some(5)).unwrap();
        assert_eq!(r.entries.len(), 6);
        assert_eq!(r.entries.last().unwrap().key, 12);
        assert!(r.max_rel_error() <= 1e-4, "{r:?}");
    }
}
