//! Per-timestep feed-forward networks.
//!
//! Each timestep `t_i` owns its own fully connected network
//! `input -> hidden -> hidden -> output` with ReLU on the hidden layers and a
//! linear output layer. No batch normalization is applied.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Tensor, Var};

/// Tensors per timestep: W1, b1, W2, b2, W3, b3.
pub const TENSORS_PER_STEP: usize = 6;

const CHECKPOINT_MAGIC: &[u8; 8] = b"FBSDENN\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("need at least one timestep")]
    NoTimesteps,
    #[error("invalid initial-value range [{lo}, {hi}]")]
    InvalidRange { lo: f64, hi: f64 },
    #[error("layer widths must be positive: {0:?}")]
    InvalidSpec(MlpSpec),
    #[error("timestep {index} out of range for {steps} networks")]
    StepOutOfRange { index: usize, steps: usize },
    #[error("network input has {got} columns, expected {expected}")]
    InputWidth { got: usize, expected: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {reason}")]
    Format { path: String, reason: String },
}

/// Layer widths of one timestep network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl MlpSpec {
    /// Two hidden layers of width `input_dim + 10`.
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: input_dim + 10,
            output_dim,
        }
    }

    pub const HIDDEN_LAYERS: usize = 2;

    fn shapes(&self) -> [Vec<usize>; TENSORS_PER_STEP] {
        let (i, h, o) = (self.input_dim, self.hidden_dim, self.output_dim);
        [
            vec![i, h],
            vec![h],
            vec![h, h],
            vec![h],
            vec![h, o],
            vec![o],
        ]
    }

    pub fn param_count(&self) -> usize {
        self.shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

/// Closed interval used to draw trainable initial values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitRange {
    pub lo: f64,
    pub hi: f64,
}

impl InitRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self, NnError> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(NnError::InvalidRange { lo, hi });
        }
        Ok(Self { lo, hi })
    }
}

impl Default for InitRange {
    fn default() -> Self {
        Self { lo: 0.0, hi: 1.0 }
    }
}

/// Anything exposing a flat list of trainable tensors addressed by key.
pub trait Parameters {
    fn param_count(&self) -> usize;
    fn param(&self, key: usize) -> &Tensor;
    fn param_mut(&mut self, key: usize) -> &mut Tensor;
}

/// `N` independent timestep networks plus an optional trainable initial value.
///
/// Parameter keys are laid out as `i * 6 + j` for tensor `j` of timestep `i`,
/// followed by the initial value (key `6 * N`) when present.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpStack {
    spec: MlpSpec,
    steps: usize,
    tensors: Vec<Tensor>,
    y0: Option<Tensor>,
}

impl MlpStack {
    /// He-style uniform fan-in initialization `U[-sqrt(6/fan_in), sqrt(6/fan_in)]`
    /// for weights, zero biases. `y0` (of width `y0_dim`) is drawn uniformly from
    /// `y0_range` when given.
    pub fn init(
        spec: MlpSpec,
        steps: usize,
        seed: u64,
        y0: Option<(usize, InitRange)>,
    ) -> Result<Self, NnError> {
        if steps == 0 {
            return Err(NnError::NoTimesteps);
        }
        if spec.input_dim == 0 || spec.hidden_dim == 0 || spec.output_dim == 0 {
            return Err(NnError::InvalidSpec(spec));
        }
        let y0 = match y0 {
            Some((dim, range)) => Some((dim, InitRange::new(range.lo, range.hi)?)),
            None => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::with_capacity(steps * TENSORS_PER_STEP);
        for _ in 0..steps {
            for (j, shape) in spec.shapes().into_iter().enumerate() {
                if j % 2 == 1 {
                    tensors.push(Tensor::zeros(&shape));
                    continue;
                }
                let bound = (6.0 / shape[0] as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let n = shape.iter().product();
                let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
                tensors.push(Tensor::new(shape, data)?);
            }
        }
        let y0 = y0.map(|(dim, range)| {
            let dist = Uniform::new_inclusive(range.lo, range.hi).expect("validated range");
            Tensor::vector((0..dim).map(|_| dist.sample(&mut rng)).collect())
        });
        Ok(Self {
            spec,
            steps,
            tensors,
            y0,
        })
    }

    /// Multiplies every output-layer weight matrix by `factor`.
    pub fn scale_output_weights(&mut self, factor: f64) {
        for i in 0..self.steps {
            self.tensors[i * TENSORS_PER_STEP + 4].scale_assign(factor);
        }
    }

    /// Sets the output-layer bias of every timestep network to `bias`.
    pub fn set_output_bias(&mut self, bias: &[f64]) {
        assert_eq!(bias.len(), self.spec.output_dim, "output bias width");
        for i in 0..self.steps {
            self.tensors[i * TENSORS_PER_STEP + 5]
                .data_mut()
                .copy_from_slice(bias);
        }
    }

    pub fn spec(&self) -> MlpSpec {
        self.spec
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn y0(&self) -> Option<&Tensor> {
        self.y0.as_ref()
    }

    pub fn y0_key(&self) -> Option<usize> {
        self.y0.as_ref().map(|_| self.steps * TENSORS_PER_STEP)
    }

    /// Parameters of timestep `i` in layer order.
    pub fn step_params(&self, i: usize) -> &[Tensor] {
        &self.tensors[i * TENSORS_PER_STEP..(i + 1) * TENSORS_PER_STEP]
    }

    /// Records every parameter on `tape` under `key_base + key`.
    pub fn bind(&self, tape: &mut Tape, key_base: usize) -> BoundStack {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(k, t)| tape.param(key_base + k, t.clone()))
            .collect();
        let y0 = self
            .y0
            .as_ref()
            .map(|t| tape.param(key_base + self.steps * TENSORS_PER_STEP, t.clone()));
        BoundStack {
            spec: self.spec,
            steps: self.steps,
            vars,
            y0,
        }
    }

    /// Non-differentiable evaluation of network `i` on a `[M, input_dim]` batch.
    pub fn eval(&self, i: usize, x: &Tensor) -> Result<Tensor, NnError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, 0);
        let xv = tape.constant(x.clone());
        let out = bound.forward(&mut tape, i, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        let path = path.as_ref();
        let io = |source| NnError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let mut header = Vec::new();
        header.extend_from_slice(CHECKPOINT_MAGIC);
        header.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [
            self.spec.input_dim,
            self.spec.hidden_dim,
            self.spec.output_dim,
            self.steps,
            self.y0.as_ref().map_or(0, Tensor::len),
            usize::from(self.y0.is_some()),
        ] {
            header.extend_from_slice(&(v as u64).to_le_bytes());
        }
        w.write_all(&header).map_err(io)?;
        for t in self.tensors.iter().chain(self.y0.iter()) {
            for v in t.data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        let path = path.as_ref();
        let name = path.display().to_string();
        let io = |source| NnError::Io {
            path: name.clone(),
            source,
        };
        let bad = |reason: &str| NnError::Format {
            path: name.clone(),
            reason: reason.to_string(),
        };
        let mut bytes = Vec::new();
        BufReader::new(File::open(path).map_err(io)?)
            .read_to_end(&mut bytes)
            .map_err(io)?;
        if bytes.len() < 12 + 6 * 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a network checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let field = |k: usize| {
            let at = 12 + 8 * k;
            u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes")) as usize
        };
        let spec = MlpSpec {
            input_dim: field(0),
            hidden_dim: field(1),
            output_dim: field(2),
        };
        let (steps, y0_len, has_y0) = (field(3), field(4), field(5) == 1);
        let mut values = bytes[12 + 6 * 8..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let expected = steps * spec.param_count() + y0_len;
        if (bytes.len() - 12 - 6 * 8) != expected * 8 {
            return Err(bad("payload length does not match header"));
        }
        let mut tensors = Vec::with_capacity(steps * TENSORS_PER_STEP);
        for _ in 0..steps {
            for shape in spec.shapes() {
                let n = shape.iter().product();
                tensors.push(Tensor::new(shape, values.by_ref().take(n).collect())?);
            }
        }
        let y0 = has_y0.then(|| Tensor::vector(values.by_ref().take(y0_len).collect()));
        Ok(Self {
            spec,
            steps,
            tensors,
            y0,
        })
    }
}

impl Parameters for MlpStack {
    fn param_count(&self) -> usize {
        self.tensors.len() + usize::from(self.y0.is_some())
    }

    fn param(&self, key: usize) -> &Tensor {
        if key == self.tensors.len() {
            self.y0.as_ref().expect("stack has no initial value")
        } else {
            &self.tensors[key]
        }
    }

    fn param_mut(&mut self, key: usize) -> &mut Tensor {
        if key == self.tensors.len() {
            self.y0.as_mut().expect("stack has no initial value")
        } else {
            &mut self.tensors[key]
        }
    }
}

/// An [`MlpStack`] whose parameters are recorded on a particular tape.
#[derive(Debug, Clone)]
pub struct BoundStack {
    spec: MlpSpec,
    steps: usize,
    vars: Vec<Var>,
    y0: Option<Var>,
}

impl BoundStack {
    pub fn y0(&self) -> Option<Var> {
        self.y0
    }

    /// Applies network `i` to a `[M, input_dim]` batch, returning `[M, output_dim]`.
    pub fn forward(&self, tape: &mut Tape, i: usize, x: Var) -> Result<Var, NnError> {
        if i >= self.steps {
            return Err(NnError::StepOutOfRange {
                index: i,
                steps: self.steps,
            });
        }
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.spec.input_dim {
            return Err(NnError::InputWidth {
                got: tape.value(x).cols(),
                expected: self.spec.input_dim,
            });
        }
        let p = &self.vars[i * TENSORS_PER_STEP..(i + 1) * TENSORS_PER_STEP];
        let h = tape.matmul(x, p[0])?;
        let h = tape.add_row(h, p[1])?;
        let h = tape.relu(h)?;
        let h = tape.matmul(h, p[2])?;
        let h = tape.add_row(h, p[3])?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, p[4])?;
        Ok(tape.add_row(o, p[5])?)
    }
}
