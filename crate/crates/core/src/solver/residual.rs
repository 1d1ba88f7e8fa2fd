//! Consistency check of a problem's coefficients against its explicit solution.

use super::SolverError;
use crate::diffcore::{Tape, Tensor};
use crate::fbsde::Fbsde;
use crate::stoch::{PathBatch, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualRow {
    pub steps: usize,
    /// `E|Y_N - g(X_N)|²` over the sample batch.
    pub residual: f64,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Applies `f` to every row of `x`, collecting a `[rows, width]` tensor.
fn rowwise(x: &Tensor, width: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Tensor {
    let mut data = Vec::with_capacity(x.rows() * width);
    for r in 0..x.rows() {
        data.extend(f(x.row(r)));
    }
    Tensor::matrix(x.rows(), width, data)
}

/// Euler-simulates the system with `Y` and `Z` inside the coefficients replaced
/// by the explicit solution evaluated on the simulated `X`, and the backward
/// equation started from the explicit `Y_0`. All resolutions share one
/// Brownian path per sample, sampled on the finest common grid and summed down.
pub fn residual_check(
    problem: &dyn Fbsde,
    step_counts: &[usize],
    samples: usize,
    seed: u64,
) -> Result<Vec<ResidualRow>, SolverError> {
    let dims = problem.dims();
    let y0 = problem
        .explicit_y0()
        .ok_or_else(|| SolverError::MissingExplicit(problem.name().to_string()))?;
    if problem.explicit_z(0.0, problem.x0()).is_none() {
        return Err(SolverError::MissingExplicit(problem.name().to_string()));
    }
    if step_counts.is_empty() || step_counts.contains(&0) {
        return Err(SolverError::Config("step counts must be positive".into()));
    }
    let fine = step_counts.iter().fold(1, |acc, &n| acc / gcd(acc, n) * n);
    let fine_grid = TimeGrid::new(problem.horizon(), fine)?;
    let fine_paths = PathBatch::sample(&fine_grid, samples, dims.d, seed)?;
    let fine_dw = fine_paths.increments();

    let mut rows = Vec::with_capacity(step_counts.len());
    for &steps in step_counts {
        let grid = TimeGrid::new(problem.horizon(), steps)?;
        let ratio = fine / steps;
        let dt = grid.dt();
        let mut x = Tensor::repeat_row(problem.x0(), samples);
        let mut y = Tensor::repeat_row(&y0, samples);
        for i in 0..steps {
            let t = grid.time(i);
            let mut dw = Tensor::zeros(&[samples, dims.d]);
            for j in 0..ratio {
                dw.add_assign(&fine_dw.time_slice(i * ratio + j, 0, samples));
            }
            let y_exact = rowwise(&x, dims.m, |r| {
                problem.explicit_y(t, r).expect("checked above")
            });
            let z_exact = rowwise(&x, dims.m * dims.d, |r| {
                problem.explicit_z(t, r).expect("checked above")
            });

            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let yv = tape.constant(y.clone());
            let ye = tape.constant(y_exact);
            let ze = tape.constant(z_exact);
            let dwv = tape.constant(dw);
            let b = problem.drift(&mut tape, t, xv, ye, ze)?;
            let b = tape.scale(b, dt)?;
            let s = problem.diffusion_dw(&mut tape, t, xv, ye, ze, dwv)?;
            let xn = tape.add(xv, b)?;
            let xn = tape.add(xn, s)?;
            let f = problem.generator(&mut tape, t, xv, ye, ze)?;
            let f = tape.scale(f, dt)?;
            let zdw = tape.batch_matvec(ze, dwv)?;
            let yn = tape.sub(yv, f)?;
            let yn = tape.add(yn, zdw)?;
            x = tape.value(xn).clone();
            y = tape.value(yn).clone();
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = problem.terminal(&mut tape, xv)?;
        let g = tape.value(g);
        let sq: f64 = y
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        rows.push(ResidualRow {
            steps,
            residual: sq / samples as f64,
        });
    }
    Ok(rows)
}
