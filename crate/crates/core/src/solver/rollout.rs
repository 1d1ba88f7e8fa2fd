//! Euler discretizations of the three control formulations, built on a tape.
//!
//! Each rollout covers a contiguous range of sample rows so that the training
//! loop can split a batch across independent tapes.

use std::ops::Range;

use super::SolverError;
use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::fbsde::Fbsde;
use crate::nn::BoundStack;
use crate::stoch::{PathBatch, TimeGrid};

/// Node values recorded along a rollout, `[rows, N + 1, n]`, `[rows, N + 1, m]`
/// and `[rows, N, m*d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x: Tensor,
    pub y: Tensor,
    pub z: Tensor,
}

/// Previous-iterate paths consumed by the Picard scheme: `y` is `[M, N, m]`
/// (values at `t_0..t_{N-1}`) and `z` is `[M, N, m*d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PicardPaths {
    pub y: Tensor,
    pub z: Tensor,
}

impl PicardPaths {
    pub fn zeros(samples: usize, steps: usize, m: usize, md: usize) -> Self {
        Self {
            y: Tensor::zeros(&[samples, steps, m]),
            z: Tensor::zeros(&[samples, steps, md]),
        }
    }

    pub fn rows(&self, r: &Range<usize>) -> Self {
        Self {
            y: self.y.slice_rows(r.start, r.len()),
            z: self.z.slice_rows(r.start, r.len()),
        }
    }

    pub fn concat(parts: &[PicardPaths]) -> Self {
        let ys: Vec<Tensor> = parts.iter().map(|p| p.y.clone()).collect();
        let zs: Vec<Tensor> = parts.iter().map(|p| p.z.clone()).collect();
        Self {
            y: Tensor::concat_rows(&ys),
            z: Tensor::concat_rows(&zs),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub x_terminal: Var,
    pub y_terminal: Var,
    /// `Y_0` as used by the rollout, `[rows, m]`.
    pub y0: Var,
    /// Per-sample penalty `Σ_i (T/N) |Y_{i+1} - u_{i+1}|²`, `[rows, 1]` (forward-feedback scheme only).
    pub penalty: Option<Var>,
    pub trajectory: Trajectory,
}

struct Recorder {
    xs: Vec<Var>,
    ys: Vec<Var>,
    zs: Vec<Var>,
}

impl Recorder {
    fn new(x: Var, y: Var) -> Self {
        Self {
            xs: vec![x],
            ys: vec![y],
            zs: Vec::new(),
        }
    }

    fn finish(self, tape: &Tape) -> Trajectory {
        let collect = |vs: &[Var]| {
            let ts: Vec<Tensor> = vs.iter().map(|&v| tape.value(v).clone()).collect();
            Tensor::stack_steps(&ts)
        };
        Trajectory {
            x: collect(&self.xs),
            y: collect(&self.ys),
            z: collect(&self.zs),
        }
    }
}

/// Attaches the time step to non-finite errors raised while stepping.
fn at_step(step: usize) -> impl Fn(DiffError) -> SolverError {
    move |e| match e.non_finite_row() {
        Some(row) => SolverError::NonFiniteState {
            step,
            sample: row,
            source: e,
        },
        None => SolverError::Diff(e),
    }
}

fn check_layout(
    problem: &dyn Fbsde,
    grid: &TimeGrid,
    paths: &PathBatch,
    rows: &Range<usize>,
) -> Result<(), SolverError> {
    let dims = problem.dims();
    if paths.dim() != dims.d || paths.steps() != grid.steps() || rows.end > paths.samples() {
        return Err(SolverError::Config(format!(
            "path batch [{}, {}, {}] does not fit rows {:?}, N = {}, d = {}",
            paths.samples(),
            paths.steps(),
            paths.dim(),
            rows,
            grid.steps(),
            dims.d
        )));
    }
    Ok(())
}

fn initial_state(tape: &mut Tape, problem: &dyn Fbsde, rows: usize) -> Var {
    tape.constant(Tensor::repeat_row(problem.x0(), rows))
}

/// `Y_{i+1} = Y_i - f dt + Z ΔW`.
fn backward_step(
    tape: &mut Tape,
    y: Var,
    f: Var,
    z: Var,
    dw: Var,
    dt: f64,
) -> Result<Var, DiffError> {
    let f_dt = tape.scale(f, dt)?;
    let z_dw = tape.batch_matvec(z, dw)?;
    let y = tape.sub(y, f_dt)?;
    tape.add(y, z_dw)
}

/// `X_{i+1} = X_i + b dt + σ ΔW`.
#[allow(clippy::too_many_arguments)]
fn forward_step(
    tape: &mut Tape,
    problem: &dyn Fbsde,
    t: f64,
    dt: f64,
    x: Var,
    y: Var,
    z: Var,
    dw: Var,
) -> Result<Var, DiffError> {
    let b = problem.drift(tape, t, x, y, z)?;
    let b_dt = tape.scale(b, dt)?;
    let s_dw = problem.diffusion_dw(tape, t, x, y, z, dw)?;
    let x = tape.add(x, b_dt)?;
    tape.add(x, s_dw)
}

/// State feedback `Z_i = φ(X_i, Y_i; θ_i)` with a trainable `Y_0`.
pub fn rollout_state_feedback(
    tape: &mut Tape,
    problem: &dyn Fbsde,
    net: &BoundStack,
    grid: &TimeGrid,
    paths: &PathBatch,
    rows: Range<usize>,
) -> Result<Rollout, SolverError> {
    check_layout(problem, grid, paths, &rows)?;
    let y0_param = net
        .y0()
        .ok_or_else(|| SolverError::Config("state-feedback network has no trainable Y0".into()))?;
    let count = rows.len();
    let dt = grid.dt();
    let mut x = initial_state(tape, problem, count);
    let y0 = tape.broadcast_rows(y0_param, count)?;
    let mut y = y0;
    let mut rec = Recorder::new(x, y);

    for i in 0..grid.steps() {
        let t = grid.time(i);
        let input = tape.concat(&[x, y]).map_err(at_step(i))?;
        let z = net.forward(tape, i, input)?;
        let dw = tape.constant(paths.step(i, rows.start, count));
        let xn = forward_step(tape, problem, t, dt, x, y, z, dw).map_err(at_step(i))?;
        let f = problem.generator(tape, t, x, y, z).map_err(at_step(i))?;
        let yn = backward_step(tape, y, f, z, dw, dt).map_err(at_step(i))?;
        rec.zs.push(z);
        rec.xs.push(xn);
        rec.ys.push(yn);
        x = xn;
        y = yn;
    }
    Ok(Rollout {
        x_terminal: x,
        y_terminal: y,
        y0,
        penalty: None,
        trajectory: rec.finish(tape),
    })
}

/// Forward feedback: `u_i = φ¹(X_i)` replaces `Y` in the forward coefficients,
/// `Z_i = φ²(X_i)`, and `Y_0 = u_0(X_0)`.
///
/// The penalty accumulates `(T/N) |Y_{t_{i+1}} - u_{t_{i+1}}|²` for
/// `i = 0..N-1`. No network lives at `t_N`; the terminal condition
/// `u_{t_N} = g(X_{t_N})` closes the sum.
#[allow(clippy::too_many_arguments)]
pub fn rollout_forward_feedback(
    tape: &mut Tape,
    problem: &dyn Fbsde,
    u_net: &BoundStack,
    z_net: &BoundStack,
    grid: &TimeGrid,
    paths: &PathBatch,
    rows: Range<usize>,
) -> Result<Rollout, SolverError> {
    check_layout(problem, grid, paths, &rows)?;
    let count = rows.len();
    let dt = grid.dt();
    let weight = grid.horizon() / grid.steps() as f64;
    let mut x = initial_state(tape, problem, count);
    let mut u = u_net.forward(tape, 0, x)?;
    let y0 = u;
    let mut y = y0;
    let mut rec = Recorder::new(x, y);
    let mut penalty: Option<Var> = None;

    for i in 0..grid.steps() {
        let t = grid.time(i);
        let z = z_net.forward(tape, i, x)?;
        let dw = tape.constant(paths.step(i, rows.start, count));
        let x_next = forward_step(tape, problem, t, dt, x, u, z, dw).map_err(at_step(i))?;
        let f = problem.generator(tape, t, x, y, z).map_err(at_step(i))?;
        let y_next = backward_step(tape, y, f, z, dw, dt).map_err(at_step(i))?;
        let u_next = if i + 1 < grid.steps() {
            u_net.forward(tape, i + 1, x_next)?
        } else {
            problem.terminal(tape, x_next).map_err(at_step(i))?
        };
        let gap = tape.sub(y_next, u_next)?;
        let gap = tape.square(gap)?;
        let gap = tape.sum_cols(gap)?;
        let gap = tape.scale(gap, weight)?;
        penalty = Some(match penalty {
            Some(acc) => tape.add(acc, gap)?,
            None => gap,
        });
        rec.zs.push(z);
        rec.xs.push(x_next);
        rec.ys.push(y_next);
        x = x_next;
        y = y_next;
        u = u_next;
    }
    Ok(Rollout {
        x_terminal: x,
        y_terminal: y,
        y0,
        penalty,
        trajectory: rec.finish(tape),
    })
}

/// Picard scheme: forward coefficients and network inputs use the previous
/// iterate `(Y^k, Z^k)`; the generator uses the current `(Y^{k+1}, Z^{k+1})`.
///
/// `prev` holds the rows of this rollout only.
pub fn rollout_picard(
    tape: &mut Tape,
    problem: &dyn Fbsde,
    net: &BoundStack,
    grid: &TimeGrid,
    paths: &PathBatch,
    rows: Range<usize>,
    prev: &PicardPaths,
) -> Result<Rollout, SolverError> {
    check_layout(problem, grid, paths, &rows)?;
    let dims = problem.dims();
    let count = rows.len();
    let expect_y = [count, grid.steps(), dims.m];
    let expect_z = [count, grid.steps(), dims.m * dims.d];
    if prev.y.shape() != expect_y || prev.z.shape() != expect_z {
        return Err(SolverError::Config(format!(
            "stored paths {:?}/{:?} do not match batch {:?}/{:?}",
            prev.y.shape(),
            prev.z.shape(),
            expect_y,
            expect_z
        )));
    }
    let y0_param = net
        .y0()
        .ok_or_else(|| SolverError::Config("Picard network has no trainable Y0".into()))?;
    let dt = grid.dt();
    let mut x = initial_state(tape, problem, count);
    let y0 = tape.broadcast_rows(y0_param, count)?;
    let mut y = y0;
    let mut rec = Recorder::new(x, y);

    for i in 0..grid.steps() {
        let t = grid.time(i);
        let y_prev = tape.constant(prev.y.time_slice(i, 0, count));
        let z_prev = tape.constant(prev.z.time_slice(i, 0, count));
        let dw = tape.constant(paths.step(i, rows.start, count));
        let x_next =
            forward_step(tape, problem, t, dt, x, y_prev, z_prev, dw).map_err(at_step(i))?;
        let input = tape.concat(&[x, y_prev, z_prev])?;
        let z = net.forward(tape, i, input)?;
        let f = problem.generator(tape, t, x, y, z).map_err(at_step(i))?;
        let y_next = backward_step(tape, y, f, z, dw, dt).map_err(at_step(i))?;
        rec.zs.push(z);
        rec.xs.push(x_next);
        rec.ys.push(y_next);
        x = x_next;
        y = y_next;
    }
    Ok(Rollout {
        x_terminal: x,
        y_terminal: y,
        y0,
        penalty: None,
        trajectory: rec.finish(tape),
    })
}

impl Trajectory {
    /// Paths handed to the next Picard iterate: `Y` at `t_0..t_{N-1}` and all `Z`.
    pub fn picard_paths(&self) -> PicardPaths {
        let (rows, steps_plus_one, m) = (self.y.shape()[0], self.y.shape()[1], self.y.shape()[2]);
        let steps = steps_plus_one - 1;
        let mut y = Vec::with_capacity(rows * steps * m);
        for r in 0..rows {
            let base = r * steps_plus_one * m;
            y.extend_from_slice(&self.y.data()[base..base + steps * m]);
        }
        PicardPaths {
            y: Tensor::new(vec![rows, steps, m], y).expect("consistent shape"),
            z: self.z.clone(),
        }
    }
}

/// `(1/2M) Σ_samples |Y_T - g(X_T)|²`, where `total_samples` is the full batch size `M`.
pub fn loss_terminal(
    tape: &mut Tape,
    y_terminal: Var,
    g_terminal: Var,
    total_samples: usize,
) -> Result<Var, DiffError> {
    let diff = tape.sub(y_terminal, g_terminal)?;
    let sq = tape.square(diff)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / (2.0 * total_samples as f64))
}

/// `(1/2M) Σ_samples (|Y_T - g(X_T)|² + L)` with per-sample penalty `L` (`[rows, 1]`).
pub fn loss_forward_feedback(
    tape: &mut Tape,
    y_terminal: Var,
    g_terminal: Var,
    penalty: Var,
    total_samples: usize,
) -> Result<Var, DiffError> {
    let diff = tape.sub(y_terminal, g_terminal)?;
    let sq = tape.square(diff)?;
    let terminal = tape.sum(sq)?;
    let pen = tape.sum(penalty)?;
    let s = tape.add(terminal, pen)?;
    tape.scale(s, 1.0 / (2.0 * total_samples as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbsde::{Dims, OracleProblem, ZeroDynamics};
    use crate::nn::{InitRange, MlpSpec, MlpStack, Parameters};

    fn scalar_loss(v: &[f64], g: &[f64], m: usize) -> f64 {
        let mut tape = Tape::new();
        let y = tape.constant(Tensor::matrix(v.len(), 1, v.to_vec()));
        let g = tape.constant(Tensor::matrix(g.len(), 1, g.to_vec()));
        let loss = loss_terminal(&mut tape, y, g, m).unwrap();
        tape.value(loss).item()
    }

    #[test]
    fn terminal_loss_examples() {
        assert_eq!(scalar_loss(&[0.3, -1.2], &[0.3, -1.2], 2), 0.0);
        assert_eq!(scalar_loss(&[1.0, 3.0], &[0.0, 0.0], 2), 2.5);
    }

    #[test]
    fn forward_feedback_loss_is_additive() {
        let mut tape = Tape::new();
        let y = tape.constant(Tensor::matrix(2, 1, vec![1.0, 3.0]));
        let g = tape.constant(Tensor::matrix(2, 1, vec![0.0, 0.0]));
        let zero = tape.constant(Tensor::zeros(&[2, 1]));
        let pen = tape.constant(Tensor::matrix(2, 1, vec![4.0, 6.0]));
        let a = loss_forward_feedback(&mut tape, y, g, zero, 2).unwrap();
        let b = loss_terminal(&mut tape, y, g, 2).unwrap();
        assert_eq!(tape.value(a).item(), tape.value(b).item());
        let c = loss_forward_feedback(&mut tape, g, g, pen, 2).unwrap();
        assert_eq!(tape.value(c).item(), 2.5);
    }

    #[test]
    fn single_step_moves_x_by_the_increment() {
        let p = OracleProblem::new();
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let paths = PathBatch::sample(&grid, 5, 1, 7).unwrap();
        let net = MlpStack::init(
            MlpSpec::new(2, 1),
            1,
            3,
            Some((1, InitRange::new(0.0, 1.0).unwrap())),
        )
        .unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, 0);
        let r = rollout_state_feedback(&mut tape, &p, &bound, &grid, &paths, 0..5).unwrap();
        assert_eq!(tape.value(r.x_terminal).data(), paths.increments().data());
    }

    #[test]
    fn silent_z_keeps_y_constant() {
        let p = OracleProblem::new();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let paths = PathBatch::sample(&grid, 6, 1, 9).unwrap();
        let mut net = MlpStack::init(
            MlpSpec::new(2, 1),
            8,
            3,
            Some((1, InitRange::new(0.0, 1.0).unwrap())),
        )
        .unwrap();
        net.scale_output_weights(0.0);
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, 0);
        let r = rollout_state_feedback(&mut tape, &p, &bound, &grid, &paths, 0..6).unwrap();
        let y0 = net.y0().unwrap().data()[0];
        assert!(tape.value(r.y_terminal).data().iter().all(|&y| y == y0));
    }

    #[test]
    fn penalty_direct_formula() {
        let p = ZeroDynamics::new(Dims { n: 1, m: 1, d: 1 }, 1.0, vec![0.5]).unwrap();
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let paths = PathBatch::sample(&grid, 1, 1, 1).unwrap();
        let mut u = MlpStack::init(MlpSpec::new(1, 1), 2, 1, None).unwrap();
        u.scale_output_weights(0.0);
        u.param_mut(5).data_mut()[0] = 2.0;
        u.param_mut(11).data_mut()[0] = 1.0;
        let mut z = MlpStack::init(MlpSpec::new(1, 1), 2, 2, None).unwrap();
        z.scale_output_weights(0.0);
        let mut tape = Tape::new();
        let ub = u.bind(&mut tape, 0);
        let zb = z.bind(&mut tape, 100);
        let r = rollout_forward_feedback(&mut tape, &p, &ub, &zb, &grid, &paths, 0..1).unwrap();
        // Y stays at u_0 = 2; gaps are 2 - 1 at t_1 and 2 - g = 2 at t_2.
        assert_eq!(tape.value(r.penalty.unwrap()).item(), 2.5);
        assert_eq!(tape.value(r.y_terminal).item(), 2.0);
    }

    #[test]
    fn picard_rejects_misshaped_paths() {
        let p = OracleProblem::new();
        let grid = TimeGrid::new(1.0, 3).unwrap();
        let paths = PathBatch::sample(&grid, 4, 1, 1).unwrap();
        let net = MlpStack::init(
            MlpSpec::new(3, 1),
            3,
            3,
            Some((1, InitRange::new(0.0, 1.0).unwrap())),
        )
        .unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, 0);
        let prev = PicardPaths::zeros(4, 2, 1, 1);
        let err = rollout_picard(&mut tape, &p, &bound, &grid, &paths, 0..4, &prev).unwrap_err();
        assert!(matches!(err, SolverError::Config(_)));
    }

    #[test]
    fn picard_paths_drop_the_terminal_y() {
        let p = OracleProblem::new();
        let grid = TimeGrid::new(1.0, 3).unwrap();
        let paths = PathBatch::sample(&grid, 2, 1, 4).unwrap();
        let net = MlpStack::init(
            MlpSpec::new(3, 1),
            3,
            3,
            Some((1, InitRange::new(0.0, 1.0).unwrap())),
        )
        .unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, 0);
        let r = rollout_picard(
            &mut tape,
            &p,
            &bound,
            &grid,
            &paths,
            0..2,
            &PicardPaths::zeros(2, 3, 1, 1),
        )
        .unwrap();
        let stored = r.trajectory.picard_paths();
        assert_eq!(stored.y.shape(), &[2, 3, 1]);
        for s in 0..2 {
            for i in 0..3 {
                assert_eq!(stored.y.data()[s * 3 + i], r.trajectory.y.data()[s * 4 + i]);
            }
        }
        assert_eq!(stored.z, r.trajectory.z);
    }
}
