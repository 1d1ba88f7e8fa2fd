//! Time partition and seeded Brownian increments.
//!
//! Increments come from a ChaCha8 stream seeded with the run seed; normals use
//! `rand_distr::StandardNormal` (ziggurat) scaled by `sqrt(dt)`. Values are
//! drawn in `(sample, step, dimension)` order, so a batch is a pure function
//! of `(grid, M, d, seed)` and replays bit-exactly on any platform.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::diffcore::Tensor;

const DUMP_MAGIC: &[u8; 8] = b"FBSDEDW\0";

#[derive(Debug, Error)]
pub enum StochError {
    #[error("horizon must be positive and finite, got {0}")]
    Horizon(f64),
    #[error("need at least one time step")]
    NoSteps,
    #[error("sample count and Brownian dimension must be positive (M={samples}, d={dim})")]
    EmptyBatch { samples: usize, dim: usize },
    #[error("path dump {path}: {reason}")]
    Dump { path: String, reason: String },
}

/// Uniform partition `t_i = i T / N` of `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self, StochError> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(StochError::Horizon(horizon));
        }
        if steps == 0 {
            return Err(StochError::NoSteps);
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    /// All `N + 1` grid points.
    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.time(i)).collect()
    }
}

/// `M` sample paths of Brownian increments, stored as `[M, N, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    dw: Tensor,
    seed: u64,
}

impl PathBatch {
    pub fn sample(
        grid: &TimeGrid,
        samples: usize,
        dim: usize,
        seed: u64,
    ) -> Result<Self, StochError> {
        if samples == 0 || dim == 0 {
            return Err(StochError::EmptyBatch { samples, dim });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = grid.dt().sqrt();
        let n = samples * grid.steps() * dim;
        let data = (0..n)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let dw = Tensor::new(vec![samples, grid.steps(), dim], data).expect("consistent shape");
        Ok(Self { dw, seed })
    }

    pub fn from_increments(dw: Tensor, seed: u64) -> Self {
        assert_eq!(dw.shape().len(), 3, "increments must be [M, N, d]");
        Self { dw, seed }
    }

    pub fn samples(&self) -> usize {
        self.dw.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.dw.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.dw.shape()[2]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn increments(&self) -> &Tensor {
        &self.dw
    }

    /// Increments of step `i` for samples `start..start + count`, as `[count, d]`.
    pub fn step(&self, i: usize, start: usize, count: usize) -> Tensor {
        self.dw.time_slice(i, start, count)
    }

    /// Sum of the increments along each path, i.e. `W_T` per sample.
    pub fn terminal_values(&self) -> Vec<Vec<f64>> {
        let (n, d) = (self.steps(), self.dim());
        (0..self.samples())
            .map(|s| {
                (0..d)
                    .map(|j| (0..n).map(|i| self.dw.data()[(s * n + i) * d + j]).sum())
                    .collect()
            })
            .collect()
    }

    /// Writes `magic, M, N, d, seed` (little-endian u64) followed by the raw increments.
    pub fn dump(&self, path: impl AsRef<Path>) -> Result<(), StochError> {
        let path = path.as_ref();
        let fail = |e: std::io::Error| StochError::Dump {
            path: path.display().to_string(),
            reason: e.to_string(),
        };
        let mut w = BufWriter::new(File::create(path).map_err(fail)?);
        w.write_all(DUMP_MAGIC).map_err(fail)?;
        for v in [self.samples(), self.steps(), self.dim()] {
            w.write_all(&(v as u64).to_le_bytes()).map_err(fail)?;
        }
        w.write_all(&self.seed.to_le_bytes()).map_err(fail)?;
        for v in self.dw.data() {
            w.write_all(&v.to_le_bytes()).map_err(fail)?;
        }
        w.flush().map_err(fail)
    }

    pub fn load_dump(path: impl AsRef<Path>) -> Result<Self, StochError> {
        let path = path.as_ref();
        let fail = |reason: String| StochError::Dump {
            path: path.display().to_string(),
            reason,
        };
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| fail(e.to_string()))?;
        if bytes.len() < 40 || &bytes[..8] != DUMP_MAGIC {
            return Err(fail("not a path dump".into()));
        }
        let word = |k: usize| {
            u64::from_le_bytes(bytes[8 + 8 * k..16 + 8 * k].try_into().expect("8 bytes"))
        };
        let shape = vec![word(0) as usize, word(1) as usize, word(2) as usize];
        let data: Vec<f64> = bytes[40..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let dw = Tensor::new(shape, data).map_err(|e| fail(e.to_string()))?;
        Ok(Self { dw, seed: word(3) })
    }
}
