//! Benchmark problems with closed-form solutions.

use super::{check_horizon, Coeff, Dims, Fbsde, FbsdeError};
use crate::diffcore::{Tape, Tensor, Var};

fn zeros_like_rows(tape: &mut Tape, like: Var, cols: usize) -> Var {
    let rows = tape.value(like).rows();
    tape.constant(Tensor::zeros(&[rows, cols]))
}

fn ones_like(tape: &mut Tape, like: Var) -> Var {
    let shape = tape.shape(like).to_vec();
    tape.constant(Tensor::full(&shape, 1.0))
}

/// Dense `[M, k*k]` matrix with `diag` (`[M, k]`) on the diagonal.
fn diag_embed(tape: &mut Tape, diag: Var) -> Coeff {
    let k = tape.value(diag).cols();
    let zero = zeros_like_rows(tape, diag, 1);
    let mut parts = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            parts.push(if i == j {
                tape.slice_cols(diag, i, 1)?
            } else {
                zero
            });
        }
    }
    tape.concat(&parts)
}

/// Columns rotated left by one: `(x_2, ..., x_d, x_1)`.
fn shift_left(tape: &mut Tape, x: Var) -> Coeff {
    let d = tape.value(x).cols();
    if d == 1 {
        return Ok(x);
    }
    let tail = tape.slice_cols(x, 1, d - 1)?;
    let head = tape.slice_cols(x, 0, 1)?;
    tape.concat(&[tail, head])
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn dims_at_least(d: usize, min: usize, name: &str) -> Result<(), FbsdeError> {
    if d < min {
        return Err(FbsdeError::InvalidParameter(format!(
            "{name} needs d >= {min}, got {d}"
        )));
    }
    Ok(())
}

/// Partially coupled BSDE with a logistic explicit solution.
///
/// `b = 0`, `σ = 0.25 I_d`,
/// `f = 0.25 (y - (2 + 0.25² d) / (2 · 0.25² d)) Σ z_i`,
/// `g(x) = Y(T, x)`, `Y(t, x) = exp(t + Σx) / (1 + exp(t + Σx))`.
///
/// The diffusion is the constant `0.25 I_d`; with `x0 = 0` a state-proportional
/// diffusion `0.25 diag(x)` would freeze `X` at the origin and is not
/// consistent with the closed-form `Y`.
#[derive(Debug, Clone)]
pub struct Example1 {
    d: usize,
    horizon: f64,
    x0: Vec<f64>,
}

impl Example1 {
    pub const SIGMA: f64 = 0.25;

    pub fn new(d: usize, horizon: f64) -> Result<Self, FbsdeError> {
        dims_at_least(d, 1, "example1")?;
        check_horizon(horizon)?;
        Ok(Self {
            d,
            horizon,
            x0: vec![0.0; d],
        })
    }

    fn shift(&self) -> f64 {
        let s2d = Self::SIGMA * Self::SIGMA * self.d as f64;
        (2.0 + s2d) / (2.0 * s2d)
    }
}

impl Fbsde for Example1 {
    fn name(&self) -> &str {
        "example1"
    }

    fn dims(&self) -> Dims {
        Dims {
            n: self.d,
            m: 1,
            d: self.d,
        }
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn x0(&self) -> &[f64] {
        &self.x0
    }

    fn drift(&self, tape: &mut Tape, _t: f64, x: Var, _y: Var, _z: Var) -> Coeff {
        Ok(zeros_like_rows(tape, x, self.d))
    }

    fn diffusion(&self, tape: &mut Tape, _t: f64, x: Var, _y: Var, _z: Var) -> Coeff {
        let rows = tape.value(x).rows();
        let diag = tape.constant(Tensor::full(&[rows, self.d], Self::SIGMA));
        diag_embed(tape, diag)
    }

    fn diffusion_dw(&self, tape: &mut Tape, _t: f64, _x: Var, _y: Var, _z: Var, dw: Var) -> Coeff {
        tape.scale(dw, Self::SIGMA)
    }

    fn generator(&self, tape: &mut Tape, _t: f64, _x: Var, y: Var, z: Var) -> Coeff {
        let zsum = tape.sum_cols(z)?;
        let shifted = tape.add_scalar(y, -self.shift())?;
        let prod = tape.mul(shifted, zsum)?;
        tape.scale(prod, Self::SIGMA)
    }

    fn terminal(&self, tape: &mut Tape, x: Var) -> Coeff {
        let s = tape.sum_cols(x)?;
        let u = tape.add_scalar(s, self.horizon)?;
        let neg = tape.neg(u)?;
        let e = tape.exp(neg)?;
        let den = tape.add_scalar(e, 1.0)?;
        let one = ones_like(tape, den);
        tape.div(one, den)
    }

    fn explicit_y(&self, t: f64, x: &[f64]) -> Option<Vec<f64>> {
        Some(vec![logistic(t + x.iter().sum::<f64>())])
    }

    fn explicit_z(&self, t: f64, x: &[f64]) -> Option<Vec<f64>> {
        let y = logistic(t + x.iter().sum::<f64>());
        Some(vec![Self::SIGMA * y * (1.0 - y); self.d])
    }
}

/// Coupled FBSDE whose forward equation has no `Z` dependence.
///
/// `b_i = (t/2) cos²(y + x_i)`, `σ_ii = (t/2) sin²(y + x_i)` and the cyclic
/// cubic solution `Y(t, x) = (1/d) Σ_i x_i² (x_{i+1} + t)` with `x_{d+1} = x_1`.
/// The generator is
///
/// ```text
/// f = Σ z_i - (1/d)(1 + t/2) Σ x_i² - (t/d) Σ x_i (x_{i+1} + t)
///     - (t² / 4d) Σ (x_{i+1} + t) sin⁴(y + x_i)
/// ```
///
/// where the wrap-around term `x_d (x_1 + t)` closes the middle sum. The last
/// coefficient `t²/(4d)` is the Itô correction `½ ∂²Y/∂x_i² σ_ii²`; it equals
/// the `t²/(2d²)` form sometimes quoted for this problem only when `d = 2`.
#[derive(Debug, Clone)]
pub struct Example2 {
    d: usize,
    horizon: f64,
    x0: Vec<f64>,
}

impl Example2 {
    pub const DEFAULT_HORIZON: f64 = 1.0;

    pub fn new(d: usize, horizon: f64, x0: f64) -> Result<Self, FbsdeError> {
        dims_at_least(d, 2, "example2")?;
        check_horizon(horizon)?;
        Ok(Self {
            d,
            horizon,
            x0: vec![x0; d],
        })
    }

    fn cubic(&self, t: f64, x: &[f64]) -> f64 {
        let d = self.d;
        (0..d)
            .map(|i| x[i] * x[i] * (x[(i + 1) % d] + t))
            .sum::<f64>()
            / d as f64
    }

    /// `Y_cyclic(t, x)` on the tape.
    fn cubic_on_tape(&self, tape: &mut Tape, t: f64, x: Var) -> Coeff {
        let next = shift_left(tape, x)?;
        let next_t = tape.add_scalar(next, t)?;
        let sq = tape.square(x)?;
        let prod = tape.mul(sq, next_t)?;
        let s = tape.sum_cols(prod)?;
        tape.scale(s, 1.0 / self.d as f64)
    }

    fn diffusion_diag(&self, tape: &mut Tape, t: f64, x: Var, y: Var) -> Coeff {
        let yb = tape.broadcast_cols(y, self.d)?;
        let arg = tape.add(x, yb)?;
        let s = tape.sin(arg)?;
        let s2 = tape.square(s)?;
        tape.scale(s2, t / 2.0)
    }
}

impl Fbsde for Example2 {
    fn name(&self) -> &str {
        "example2"
    }

    fn dims(&self) -> Dims {
        Dims {
            n: self.d,
            m: 1,
            d: self.d,
        }
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn x0(&self) -> &[f64] {
        &self.x0
    }

    fn drift(&self, tape: &mut Tape, t: f64, x: Var, y: Var, _z: Var) -> Coeff {
        let yb = tape.broadcast_cols(y, self.d)?;
        let arg = tape.add(x, yb)?;
        let c = tape.cos(arg)?;
        let c2 = tape.square(c)?;
        tape.scale(c2, t / 2.0)
    }

    fn diffusion(&self, tape: &mut Tape, t: f64, x: Var, y: Var, _z: Var) -> Coeff {
        let diag = self.diffusion_diag(tape, t, x, y)?;
        diag_embed(tape, diag)
    }

    fn diffusion_dw(&self, tape: &mut Tape, t: f64, x: Var, y: Var, _z: Var, dw: Var) -> Coeff {
        let diag = self.diffusion_diag(tape, t, x, y)?;
        tape.mul(diag, dw)
    }

    fn generator(&self, tape: &mut Tape, t: f64, x: Var, y: Var, z: Var) -> Coeff {
        let d = self.d as f64;
        let zsum = tape.sum_cols(z)?;

        let sq = tape.square(x)?;
        let sq_sum = tape.sum_cols(sq)?;
        let quad = tape.scale(sq_sum, (1.0 + t / 2.0) / d)?;

        let next = shift_left(tape, x)?;
        let next_t = tape.add_scalar(next, t)?;
        let cross = tape.mul(x, next_t)?;
        let cross_sum = tape.sum_cols(cross)?;
        let cross_term = tape.scale(cross_sum, t / d)?;

        let yb = tape.broadcast_cols(y, self.d)?;
        let arg = tape.add(x, yb)?;
        let s = tape.sin(arg)?;
        let s2 = tape.square(s)?;
        let s4 = tape.square(s2)?;
        let ito = tape.mul(next_t, s4)?;
        let ito_sum = tape.sum_cols(ito)?;
        let ito_term = tape.scale(ito_sum, t * t / (4.0 * d))?;

        let out = tape.sub(zsum, quad)?;
        let out = tape.sub(out, cross_term)?;
        tape.sub(out, ito_term)
    }

    fn terminal(&self, tape: &mut Tape, x: Var) -> Coeff {
        self.cubic_on_tape(tape, self.horizon, x)
    }

    fn explicit_y(&self, t: f64, x: &[f64]) -> Option<Vec<f64>> {
        Some(vec![self.cubic(t, x)])
    }

    fn explicit_z(&self, t: f64, x: &[f64]) -> Option<Vec<f64>> {
        let d = self.d;
        let y = self.cubic(t, x);
        Some(
            (0..d)
                .map(|j| {
                    let grad =
                        (2.0 * x[j] * (x[(j + 1) % d] + t) + x[(j + d - 1) % d].powi(2)) / d as f64;
                    let sigma = t / 2.0 * (y + x[j]).sin().powi(2);
                    sigma * grad
                })
                .collect(),
        )
    }
}

/// One-dimensional fully coupled FBSDE whose diffusion depends on `Z`.
///
/// `Y(t, x) = sin(t + x)`, `Z(t, x) = cos²(t + x)`.
#[derive(Debug, Clone)]
pub struct Example3 {
    horizon: f64,
    x0: Vec<f64>,
}

impl Default for Example3 {
    fn default() -> Self {
        Self {
            horizon: 0.1,
            x0: vec![1.0],
        }
    }
}

impl Example3 {
    /// `T = 0.1`, `x0 = 1`.
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(horizon: f64, x0: f64) -> Result<Self, FbsdeError> {
        check_horizon(horizon)?;
        Ok(Self {
            horizon,
            x0: vec![x0],
        })
    }
}

impl Fbsde for Example3 {
    fn name(&self) -> &str {
        "example3"
    }

    fn dims(&self) -> Dims {
        Dims { n: 1, m: 1, d: 1 }
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn x0(&self) -> &[f64] {
        &self.x0
    }

    fn drift(&self, tape: &mut Tape, t: f64, x: Var, y: Var, z: Var) -> Coeff {
        // -1/2 sin(t+x) cos(t+x) (y² + z)
        let arg = tape.add_scalar(x, t)?;
        let s = tape.sin(arg)?;
        let c = tape.cos(arg)?;
        let y2 = tape.square(y)?;
        let w = tape.add(y2, z)?;
        let sc = tape.mul(s, c)?;
        let out = tape.mul(sc, w)?;
        tape.scale(out, -0.5)
    }

    fn diffusion(&self, tape: &mut Tape, t: f64, x: Var, y: Var, z: Var) -> Coeff {
        // 1/2 cos(t+x) (y sin(t+x) + z + 1)
        let arg = tape.add_scalar(x, t)?;
        let s = tape.sin(arg)?;
        let c = tape.cos(arg)?;
        let ys = tape.mul(y, s)?;
        let inner = tape.add(ys, z)?;
        let inner = tape.add_scalar(inner, 1.0)?;
        let out = tape.mul(c, inner)?;
        tape.scale(out, 0.5)
    }

    fn diffusion_dw(&self, tape: &mut Tape, t: f64, x: Var, y: Var, z: Var, dw: Var) -> Coeff {
        let sigma = self.diffusion(tape, t, x, y, z)?;
        tape.mul(sigma, dw)
    }

    fn generator(&self, tape: &mut Tape, t: f64, x: Var, y: Var, z: Var) -> Coeff {
        let arg = tape.add_scalar(x, t)?;
        let c = tape.cos(arg)?;
        let yz = tape.mul(y, z)?;
        tape.sub(yz, c)
    }

    fn terminal(&self, tape: &mut Tape, x: Var) -> Coeff {
        let arg = tape.add_scalar(x, self.horizon)?;
        tape.sin(arg)
    }

    fn explicit_y(&self, t: f64, x: &[f64]) -> Option<Vec<f64>> {
        Some(vec![(t + x[0]).sin()])
    }

    fn explicit_z(&self, t: f64, x: &[f64]) -> Option<Vec<f64>> {
        Some(vec![(t + x[0]).cos().powi(2)])
    }
}

/// FBSDE with a quadratic-in-`Z` generator and `Z`-dependent diffusion.
///
/// `b = 0`, `σ_ii = d exp(-x̄) z_i`, `f = -exp(-x̄) Σ z_i²`,
/// `g(x) = exp(x̄)` with `x̄ = (1/d) Σ x_i`, written in the `Y_t = g + ∫ f - ∫ Z dW`
/// convention. `Y(t, x) = exp(x̄)` paired with `Z = 0` solves the system.
#[derive(Debug, Clone)]
pub struct Example4 {
    d: usize,
    horizon: f64,
    x0: Vec<f64>,
}

impl Example4 {
    pub fn new(d: usize, horizon: f64, x0: f64) -> Result<Self, FbsdeError> {
        dims_at_least(d, 1, "example4")?;
        check_horizon(horizon)?;
        Ok(Self {
            d,
            horizon,
            x0: vec![x0; d],
        })
    }

    fn neg_mean_exp(&self, tape: &mut Tape, x: Var) -> Coeff {
        let s = tape.sum_cols(x)?;
        let m = tape.scale(s, -1.0 / self.d as f64)?;
        tape.exp(m)
    }

    fn diffusion_diag(&self, tape: &mut Tape, x: Var, z: Var) -> Coeff {
        let e = self.neg_mean_exp(tape, x)?;
        let eb = tape.broadcast_cols(e, self.d)?;
        let out = tape.mul(eb, z)?;
        tape.scale(out, self.d as f64)
    }
}

impl Fbsde for Example4 {
    fn name(&self) -> &str {
        "example4"
    }

    fn dims(&self) -> Dims {
        Dims {
            n: self.d,
            m: 1,
            d: self.d,
        }
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn x0(&self) -> &[f64] {
        &self.x0
    }

    fn drift(&self, tape: &mut Tape, _t: f64, x: Var, _y: Var, _z: Var) -> Coeff {
        Ok(zeros_like_rows(tape, x, self.d))
    }

    fn diffusion(&self, tape: &mut Tape, _t: f64, x: Var, _y: Var, z: Var) -> Coeff {
        let diag = self.diffusion_diag(tape, x, z)?;
        diag_embed(tape, diag)
    }

    fn diffusion_dw(&self, tape: &mut Tape, _t: f64, x: Var, _y: Var, z: Var, dw: Var) -> Coeff {
        let diag = self.diffusion_diag(tape, x, z)?;
        tape.mul(diag, dw)
    }

    fn generator(&self, tape: &mut Tape, _t: f64, x: Var, _y: Var, z: Var) -> Coeff {
        let e = self.neg_mean_exp(tape, x)?;
        let z2 = tape.square(z)?;
        let s = tape.sum_cols(z2)?;
        let out = tape.mul(e, s)?;
        tape.neg(out)
    }

    fn terminal(&self, tape: &mut Tape, x: Var) -> Coeff {
        let s = tape.sum_cols(x)?;
        let m = tape.scale(s, 1.0 / self.d as f64)?;
        tape.exp(m)
    }

    fn explicit_y(&self, _t: f64, x: &[f64]) -> Option<Vec<f64>> {
        Some(vec![(x.iter().sum::<f64>() / self.d as f64).exp()])
    }

    fn explicit_z(&self, _t: f64, _x: &[f64]) -> Option<Vec<f64>> {
        Some(vec![0.0; self.d])
    }
}

/// Decoupled linear check problem: `dX = dW`, `x0 = 0`, `f = 0`, `g(x) = x²`.
///
/// `Y(t, x) = x² + (T - t)`, so `Y_0 = E[W_T²] = T`.
#[derive(Debug, Clone)]
pub struct OracleProblem {
    horizon: f64,
    x0: Vec<f64>,
}

impl Default for OracleProblem {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            x0: vec![0.0],
        }
    }
}

impl OracleProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_horizon(horizon: f64) -> Result<Self, FbsdeError> {
        check_horizon(horizon)?;
        Ok(Self {
            horizon,
            x0: vec![0.0],
        })
    }
}

impl Fbsde for OracleProblem {
    fn name(&self) -> &str {
        "oracle"
    }

    fn dims(&self) -> Dims {
        Dims { n: 1, m: 1, d: 1 }
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn x0(&self) -> &[f64] {
        &self.x0
    }

    fn drift(&self, tape: &mut Tape, _t: f64, x: Var, _y: Var, _z: Var) -> Coeff {
        Ok(zeros_like_rows(tape, x, 1))
    }

    fn diffusion(&self, tape: &mut Tape, _t: f64, x: Var, _y: Var, _z: Var) -> Coeff {
        Ok(ones_like(tape, x))
    }

    fn diffusion_dw(&self, _tape: &mut Tape, _t: f64, _x: Var, _y: Var, _z: Var, dw: Var) -> Coeff {
        Ok(dw)
    }

    fn generator(&self, tape: &mut Tape, _t: f64, x: Var, _y: Var, _z: Var) -> Coeff {
        Ok(zeros_like_rows(tape, x, 1))
    }

    fn terminal(&self, tape: &mut Tape, x: Var) -> Coeff {
        tape.square(x)
    }

    fn explicit_y(&self, t: f64, x: &[f64]) -> Option<Vec<f64>> {
        Some(vec![x[0] * x[0] + (self.horizon - t)])
    }

    fn explicit_z(&self, _t: f64, x: &[f64]) -> Option<Vec<f64>> {
        Some(vec![2.0 * x[0]])
    }
}

/// `b = σ = f = 0`, `g = 0`: every state stays where it started.
#[derive(Debug, Clone)]
pub struct ZeroDynamics {
    dims: Dims,
    horizon: f64,
    x0: Vec<f64>,
}

impl ZeroDynamics {
    pub fn new(dims: Dims, horizon: f64, x0: Vec<f64>) -> Result<Self, FbsdeError> {
        check_horizon(horizon)?;
        if x0.len() != dims.n {
            return Err(FbsdeError::InvalidParameter(format!(
                "x0 has {} entries, n = {}",
                x0.len(),
                dims.n
            )));
        }
        Ok(Self { dims, horizon, x0 })
    }
}

impl Fbsde for ZeroDynamics {
    fn name(&self) -> &str {
        "zero"
    }

    fn dims(&self) -> Dims {
        self.dims
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn x0(&self) -> &[f64] {
        &self.x0
    }

    fn drift(&self, tape: &mut Tape, _t: f64, x: Var, _y: Var, _z: Var) -> Coeff {
        Ok(zeros_like_rows(tape, x, self.dims.n))
    }

    fn diffusion(&self, tape: &mut Tape, _t: f64, x: Var, _y: Var, _z: Var) -> Coeff {
        Ok(zeros_like_rows(tape, x, self.dims.n * self.dims.d))
    }

    fn generator(&self, tape: &mut Tape, _t: f64, x: Var, _y: Var, _z: Var) -> Coeff {
        Ok(zeros_like_rows(tape, x, self.dims.m))
    }

    fn terminal(&self, tape: &mut Tape, x: Var) -> Coeff {
        Ok(zeros_like_rows(tape, x, self.dims.m))
    }

    fn explicit_y(&self, _t: f64, _x: &[f64]) -> Option<Vec<f64>> {
        Some(vec![0.0; self.dims.m])
    }

    fn explicit_z(&self, _t: f64, _x: &[f64]) -> Option<Vec<f64>> {
        Some(vec![0.0; self.dims.m * self.dims.d])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbsde::{problem_by_name, ProblemParams, PROBLEM_NAMES};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_problems() -> Vec<Box<dyn Fbsde>> {
        vec![
            Box::new(Example1::new(3, 0.5).unwrap()),
            Box::new(Example2::new(4, 1.0, 1.0).unwrap()),
            Box::new(Example3::new()),
            Box::new(Example4::new(5, 0.1, 0.5).unwrap()),
            Box::new(OracleProblem::new()),
            Box::new(ZeroDynamics::new(Dims { n: 2, m: 2, d: 3 }, 1.0, vec![0.5, -0.5]).unwrap()),
        ]
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Evaluates `g` on a single point through the tape.
    fn terminal_at(p: &dyn Fbsde, x: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::matrix(1, x.len(), x.to_vec()));
        let g = p.terminal(&mut tape, xv).unwrap();
        tape.value(g).data().to_vec()
    }

    #[test]
    fn coefficient_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = 7;
        for p in all_problems() {
            let Dims { n, m, d } = p.dims();
            let mut tape = Tape::new();
            let x = tape.constant(rand_mat(&mut rng, rows, n));
            let y = tape.constant(rand_mat(&mut rng, rows, m));
            let z = tape.constant(rand_mat(&mut rng, rows, m * d));
            let dw = tape.constant(rand_mat(&mut rng, rows, d));
            let b = p.drift(&mut tape, 0.3, x, y, z).unwrap();
            let s = p.diffusion(&mut tape, 0.3, x, y, z).unwrap();
            let sdw = p.diffusion_dw(&mut tape, 0.3, x, y, z, dw).unwrap();
            let f = p.generator(&mut tape, 0.3, x, y, z).unwrap();
            let g = p.terminal(&mut tape, x).unwrap();
            assert_eq!(tape.shape(b), &[rows, n], "{} drift", p.name());
            assert_eq!(tape.shape(s), &[rows, n * d], "{} diffusion", p.name());
            assert_eq!(tape.shape(sdw), &[rows, n], "{} diffusion_dw", p.name());
            assert_eq!(tape.shape(f), &[rows, m], "{} generator", p.name());
            assert_eq!(tape.shape(g), &[rows, m], "{} terminal", p.name());

            // The structured product agrees with the dense one.
            let dense = tape.batch_matvec(s, dw).unwrap();
            for (a, b) in tape.value(dense).data().iter().zip(tape.value(sdw).data()) {
                assert!((a - b).abs() < 1e-14, "{}", p.name());
            }
        }
    }

    #[test]
    fn terminal_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in all_problems() {
            let n = p.dims().n;
            for _ in 0..100 {
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
                let g = terminal_at(p.as_ref(), &x);
                let y = p.explicit_y(p.horizon(), &x).unwrap();
                for (a, b) in g.iter().zip(&y) {
                    assert!((a - b).abs() <= 1e-12, "{}: {a} vs {b}", p.name());
                }
            }
        }
    }

    #[test]
    fn example1_values() {
        let p = Example1::new(1, 0.5).unwrap();
        assert_eq!(p.explicit_y0().unwrap(), vec![0.5]);
        let g = terminal_at(&p, &[0.0])[0];
        assert!((g - 0.5f64.exp() / (1.0 + 0.5f64.exp())).abs() < 1e-15);
        assert!((g - 0.62246).abs() < 1e-5);
        let p = Example1::new(100, 0.5).unwrap();
        assert_eq!(p.explicit_y0().unwrap(), vec![0.5]);
    }

    #[test]
    fn example2_values() {
        for d in 2..7 {
            let p = Example2::new(d, 1.0, 1.0).unwrap();
            assert!((p.explicit_y0().unwrap()[0] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn example2_diffusion_is_diagonal() {
        let p = Example2::new(3, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(rand_mat(&mut rng, 4, 3));
        let y = tape.constant(rand_mat(&mut rng, 4, 1));
        let z = tape.constant(rand_mat(&mut rng, 4, 3));
        let s = p.diffusion(&mut tape, 0.7, x, y, z).unwrap();
        let sv = tape.value(s);
        for r in 0..4 {
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        assert_eq!(sv.get(r, i * 3 + j), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn example2_forward_coefficients_ignore_z() {
        let p = Example2::new(3, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs = rand_mat(&mut rng, 5, 3);
        let ys = rand_mat(&mut rng, 5, 1);
        let eval = |zs: Tensor| {
            let mut tape = Tape::new();
            let x = tape.constant(xs.clone());
            let y = tape.constant(ys.clone());
            let z = tape.constant(zs);
            let b = p.drift(&mut tape, 0.4, x, y, z).unwrap();
            let s = p.diffusion(&mut tape, 0.4, x, y, z).unwrap();
            (tape.value(b).clone(), tape.value(s).clone())
        };
        let a = eval(rand_mat(&mut rng, 5, 3));
        let b = eval(rand_mat(&mut rng, 5, 3));
        assert_eq!(a, b);
    }

    #[test]
    fn example3_values() {
        let p = Example3::new();
        let y0 = p.explicit_y0().unwrap()[0];
        assert!((y0 - 1f64.sin()).abs() < 1e-15);
        assert!((y0 - 0.84147).abs() < 1e-5);
        let z0 = p.explicit_z(0.0, &[1.0]).unwrap()[0];
        assert!((z0 - 0.29193).abs() < 1e-5);
        assert_eq!(terminal_at(&p, &[1.0])[0], (0.1f64 + 1.0).sin());
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn example4_values() {
        let p = Example4::new(100, 0.1, 1.0).unwrap();
        assert!((p.explicit_y0().unwrap()[0] - 2.71828).abs() < 1e-5);
        let p = Example4::new(100, 0.1, 0.2).unwrap();
        assert!((p.explicit_y0().unwrap()[0] - 1.22140).abs() < 1e-5);
        let p = Example4::new(100, 0.1, 0.5).unwrap();
        assert!((p.explicit_y0().unwrap()[0] - 1.64872).abs() < 1e-5);
    }

    #[test]
    fn oracle_values() {
        let p = OracleProblem::new();
        assert_eq!(p.explicit_y0().unwrap(), vec![1.0]);
        for x in [-1.3, 0.0, 0.4] {
            assert_eq!(
                p.explicit_y(1.0, &[x]).unwrap()[0],
                terminal_at(&p, &[x])[0]
            );
        }
    }

    #[test]
    fn registry() {
        for name in PROBLEM_NAMES {
            let p = problem_by_name(name, &ProblemParams::default()).unwrap();
            assert_eq!(p.name(), name);
        }
        let err = problem_by_name("example9", &ProblemParams::default())
            .err()
            .unwrap();
        let msg = err.to_string();
        assert!(PROBLEM_NAMES.iter().all(|n| msg.contains(n)));
        let bad_d = ProblemParams {
            d: Some(1),
            ..Default::default()
        };
        assert!(problem_by_name("example2", &bad_d).is_err());
        let bad_d = ProblemParams {
            d: Some(3),
            ..Default::default()
        };
        assert!(problem_by_name("example3", &bad_d).is_err());
        let bad_t = ProblemParams {
            horizon: Some(-1.0),
            ..Default::default()
        };
        assert!(problem_by_name("example4", &bad_t).is_err());
    }
}
