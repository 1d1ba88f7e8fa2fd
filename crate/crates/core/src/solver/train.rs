use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::rollout::{self, PicardPaths, Rollout, Trajectory};
use super::{Algorithm, InitialPaths, SolverError, TrainConfig};
use crate::diffcore::{GradMap, Tape, Tensor};
use crate::exec::{map_indexed, split_rows};
use crate::fbsde::{Dims, Fbsde};
use crate::nn::{InitRange, MlpSpec, MlpStack, NnError, Parameters};
use crate::optim::Optimizer;
use crate::report::{IterRecord, ProblemInfo, RunReport, Termination};
use crate::stoch::{PathBatch, TimeGrid};

const TAG_INIT: u64 = 1;
const TAG_PATHS: u64 = 2;
const TAG_PICARD: u64 = 3;
const TAG_RESAMPLE: u64 = 4;
const TAG_SECOND_NET: u64 = 5;

/// Mixes a run seed with a stream tag (splitmix64 finalizer), so the network
/// initialization, the Brownian batch and the Picard start paths draw from
/// unrelated streams.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trainable networks of one algorithm.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    StateFeedback(MlpStack),
    ForwardFeedback { u: MlpStack, z: MlpStack },
    Picard(MlpStack),
}

impl Model {
    pub fn init(
        algorithm: Algorithm,
        dims: Dims,
        steps: usize,
        seed: u64,
        y0_range: InitRange,
    ) -> Result<Self, NnError> {
        let Dims { n, m, d } = dims;
        Ok(match algorithm {
            Algorithm::StateFeedback => Model::StateFeedback(MlpStack::init(
                MlpSpec::new(n + m, m * d),
                steps,
                seed,
                Some((m, y0_range)),
            )?),
            Algorithm::ForwardFeedback => Model::ForwardFeedback {
                u: {
                    // No separate Y0 here: the range sets the starting level of u instead.
                    let mut u = MlpStack::init(MlpSpec::new(n, m), steps, seed, None)?;
                    let level = MlpStack::init(MlpSpec::new(1, 1), 1, seed, Some((m, y0_range)))?;
                    u.set_output_bias(level.y0().expect("requested").data());
                    u
                },
                z: MlpStack::init(
                    MlpSpec::new(n, m * d),
                    steps,
                    derive_seed(seed, TAG_SECOND_NET),
                    None,
                )?,
            },
            Algorithm::Picard => Model::Picard(MlpStack::init(
                MlpSpec::new(n + m + m * d, m * d),
                steps,
                seed,
                Some((m, y0_range)),
            )?),
        })
    }

    pub fn algorithm(&self) -> Algorithm {
        match self {
            Model::StateFeedback(_) => Algorithm::StateFeedback,
            Model::ForwardFeedback { .. } => Algorithm::ForwardFeedback,
            Model::Picard(_) => Algorithm::Picard,
        }
    }

    fn stacks(&self) -> Vec<&MlpStack> {
        match self {
            Model::StateFeedback(s) | Model::Picard(s) => vec![s],
            Model::ForwardFeedback { u, z } => vec![u, z],
        }
    }

    pub fn scale_output_weights(&mut self, factor: f64) {
        match self {
            Model::StateFeedback(s) | Model::Picard(s) => s.scale_output_weights(factor),
            Model::ForwardFeedback { u, z } => {
                u.scale_output_weights(factor);
                z.scale_output_weights(factor);
            }
        }
    }

    fn file_names(algorithm: Algorithm) -> &'static [&'static str] {
        match algorithm {
            Algorithm::StateFeedback => &["alg1.bin"],
            Algorithm::ForwardFeedback => &["alg2_u.bin", "alg2_z.bin"],
            Algorithm::Picard => &["alg3.bin"],
        }
    }

    /// Writes every network of the model into `dir` in the checkpoint format of [`MlpStack::save`].
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), NnError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|source| NnError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        for (stack, name) in self
            .stacks()
            .into_iter()
            .zip(Self::file_names(self.algorithm()))
        {
            stack.save(dir.join(name))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, algorithm: Algorithm) -> Result<Self, NnError> {
        let dir = dir.as_ref();
        let names = Self::file_names(algorithm);
        Ok(match algorithm {
            Algorithm::StateFeedback => Model::StateFeedback(MlpStack::load(dir.join(names[0]))?),
            Algorithm::ForwardFeedback => Model::ForwardFeedback {
                u: MlpStack::load(dir.join(names[0]))?,
                z: MlpStack::load(dir.join(names[1]))?,
            },
            Algorithm::Picard => Model::Picard(MlpStack::load(dir.join(names[0]))?),
        })
    }

    fn check_layout(&self, dims: Dims, steps: usize) -> Result<(), SolverError> {
        let fresh = Model::init(self.algorithm(), dims, steps, 0, InitRange::default())?;
        for (have, want) in self.stacks().iter().zip(fresh.stacks()) {
            if have.spec() != want.spec()
                || have.steps() != want.steps()
                || have.y0().map(Tensor::len) != want.y0().map(Tensor::len)
            {
                return Err(SolverError::Config(format!(
                    "model layout {:?} x {} does not fit the problem (expected {:?} x {})",
                    have.spec(),
                    have.steps(),
                    want.spec(),
                    want.steps()
                )));
            }
        }
        Ok(())
    }
}

impl Parameters for Model {
    fn param_count(&self) -> usize {
        self.stacks().iter().map(|s| s.param_count()).sum()
    }

    fn param(&self, key: usize) -> &Tensor {
        match self {
            Model::StateFeedback(s) | Model::Picard(s) => s.param(key),
            Model::ForwardFeedback { u, z } => {
                let split = u.param_count();
                if key < split {
                    u.param(key)
                } else {
                    z.param(key - split)
                }
            }
        }
    }

    fn param_mut(&mut self, key: usize) -> &mut Tensor {
        match self {
            Model::StateFeedback(s) | Model::Picard(s) => s.param_mut(key),
            Model::ForwardFeedback { u, z } => {
                let split = u.param_count();
                if key < split {
                    u.param_mut(key)
                } else {
                    z.param_mut(key - split)
                }
            }
        }
    }
}

/// Result of one forward pass over the whole batch.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    /// First component of `Y_0` on the first sample.
    pub y0: f64,
    /// Empty when gradients were not requested.
    pub grads: GradMap,
    pub trajectory: Trajectory,
}

struct ShardResult {
    loss: f64,
    grads: GradMap,
    trajectory: Trajectory,
}

/// Training state: problem, fixed batch, networks, optimizer and, for the
/// Picard scheme, the previous iterate's paths.
pub struct Trainer<'a> {
    problem: &'a dyn Fbsde,
    config: TrainConfig,
    grid: TimeGrid,
    paths: PathBatch,
    model: Model,
    optimizer: Optimizer,
    prev: Option<PicardPaths>,
    iteration: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(problem: &'a dyn Fbsde, config: TrainConfig) -> Result<Self, SolverError> {
        config.validate()?;
        let dims = problem.dims();
        let mut model = Model::init(
            config.algorithm,
            dims,
            config.time_steps,
            derive_seed(config.seed, TAG_INIT),
            config.y0_range,
        )?;
        model.scale_output_weights(config.output_init_scale);
        Self::with_model(problem, config, model)
    }

    /// Starts from an existing (for instance checkpointed) model.
    pub fn with_model(
        problem: &'a dyn Fbsde,
        config: TrainConfig,
        model: Model,
    ) -> Result<Self, SolverError> {
        config.validate()?;
        let dims = problem.dims();
        if problem.x0().len() != dims.n {
            return Err(SolverError::DimMismatch {
                n: dims.n,
                m: dims.m,
                d: dims.d,
                x0_len: problem.x0().len(),
            });
        }
        if model.algorithm() != config.algorithm {
            return Err(SolverError::Config(format!(
                "model is for {} but the configuration selects {}",
                model.algorithm().label(),
                config.algorithm.label()
            )));
        }
        model.check_layout(dims, config.time_steps)?;
        let grid = TimeGrid::new(problem.horizon(), config.time_steps)?;
        let paths = PathBatch::sample(
            &grid,
            config.samples,
            dims.d,
            derive_seed(config.seed, TAG_PATHS),
        )?;
        let prev =
            (config.algorithm == Algorithm::Picard).then(|| initial_picard_paths(&config, dims));
        let optimizer = Optimizer::new(config.optimizer, &model)?;
        Ok(Self {
            problem,
            config,
            grid,
            paths,
            model,
            optimizer,
            prev,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn paths(&self) -> &PathBatch {
        &self.paths
    }

    /// Replaces the Brownian batch; the sample count must stay the same.
    pub fn set_paths(&mut self, paths: PathBatch) -> Result<(), SolverError> {
        if paths.samples() != self.config.samples
            || paths.steps() != self.grid.steps()
            || paths.dim() != self.problem.dims().d
        {
            return Err(SolverError::Config(
                "replacement path batch has the wrong shape".into(),
            ));
        }
        self.paths = paths;
        Ok(())
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn prev_paths(&self) -> Option<&PicardPaths> {
        self.prev.as_ref()
    }

    pub fn set_prev_paths(&mut self, prev: PicardPaths) -> Result<(), SolverError> {
        if self.config.algorithm != Algorithm::Picard {
            return Err(SolverError::Config(
                "only the Picard scheme keeps previous paths".into(),
            ));
        }
        self.prev = Some(prev);
        Ok(())
    }

    /// Completed parameter updates.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn rollout_shard(
        &self,
        tape: &mut Tape,
        rows: std::ops::Range<usize>,
    ) -> Result<(Rollout, crate::diffcore::Var), SolverError> {
        let problem = self.problem;
        let total = self.config.samples;
        let r = match &self.model {
            Model::StateFeedback(s) => {
                let net = s.bind(tape, 0);
                rollout::rollout_state_feedback(tape, problem, &net, &self.grid, &self.paths, rows)?
            }
            Model::ForwardFeedback { u, z } => {
                let u_net = u.bind(tape, 0);
                let z_net = z.bind(tape, u.param_count());
                rollout::rollout_forward_feedback(
                    tape,
                    problem,
                    &u_net,
                    &z_net,
                    &self.grid,
                    &self.paths,
                    rows,
                )?
            }
            Model::Picard(s) => {
                let net = s.bind(tape, 0);
                let prev = self
                    .prev
                    .as_ref()
                    .expect("Picard trainer always holds previous paths")
                    .rows(&rows);
                rollout::rollout_picard(tape, problem, &net, &self.grid, &self.paths, rows, &prev)?
            }
        };
        let g = problem
            .terminal(tape, r.x_terminal)
            .map_err(|e| terminal_error(e, self.grid.steps()))?;
        let loss = match r.penalty {
            Some(p) => rollout::loss_forward_feedback(tape, r.y_terminal, g, p, total)?,
            None => rollout::loss_terminal(tape, r.y_terminal, g, total)?,
        };
        Ok((r, loss))
    }

    /// Runs the rollout on every shard and reduces losses and gradients in shard order.
    pub fn evaluate(&self, with_grads: bool) -> Result<Evaluation, SolverError> {
        let shards = split_rows(self.config.samples, self.config.shards);
        let results = map_indexed(
            self.config.execution,
            shards.len(),
            |k| -> Result<ShardResult, SolverError> {
                let rows = shards[k].clone();
                let offset = rows.start;
                let mut tape = Tape::new();
                let (r, loss) = self
                    .rollout_shard(&mut tape, rows)
                    .map_err(|e| shift_sample(e, offset))?;
                let grads = if with_grads {
                    tape.backward(loss)?
                } else {
                    GradMap::new()
                };
                Ok(ShardResult {
                    loss: tape.value(loss).item(),
                    grads,
                    trajectory: r.trajectory,
                })
            },
        );
        let mut loss = 0.0;
        let mut grads = GradMap::new();
        let mut trajectories = Vec::with_capacity(results.len());
        for res in results {
            let res = res?;
            loss += res.loss;
            for (key, g) in res.grads {
                match grads.get_mut(&key) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        grads.insert(key, g);
                    }
                }
            }
            trajectories.push(res.trajectory);
        }
        let trajectory = Trajectory {
            x: Tensor::concat_rows(&trajectories.iter().map(|t| t.x.clone()).collect::<Vec<_>>()),
            y: Tensor::concat_rows(&trajectories.iter().map(|t| t.y.clone()).collect::<Vec<_>>()),
            z: Tensor::concat_rows(&trajectories.iter().map(|t| t.z.clone()).collect::<Vec<_>>()),
        };
        Ok(Evaluation {
            loss,
            y0: trajectory.y.data()[0],
            grads,
            trajectory,
        })
    }

    /// One training iteration: evaluate, update the parameters, then store the
    /// new paths (Picard) or draw a new batch (when resampling).
    pub fn step(&mut self) -> Result<Evaluation, SolverError> {
        let eval = self.evaluate(true)?;
        self.update(&eval)?;
        Ok(eval)
    }

    fn update(&mut self, eval: &Evaluation) -> Result<(), SolverError> {
        self.optimizer.apply(&mut self.model, &eval.grads)?;
        self.iteration += 1;
        if self.prev.is_some() {
            self.prev = Some(eval.trajectory.picard_paths());
        }
        if self.config.resample_each_iter {
            let seed = derive_seed(
                derive_seed(self.config.seed, TAG_RESAMPLE),
                self.iteration as u64,
            );
            self.paths =
                PathBatch::sample(&self.grid, self.config.samples, self.problem.dims().d, seed)?;
        }
        Ok(())
    }
}

fn initial_picard_paths(config: &TrainConfig, dims: Dims) -> PicardPaths {
    let (samples, steps, m, md) = (config.samples, config.time_steps, dims.m, dims.m * dims.d);
    let mut p = PicardPaths::zeros(samples, steps, m, md);
    if config.initial_paths == InitialPaths::Normal {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_PICARD));
        for v in p.y.data_mut().iter_mut().chain(p.z.data_mut().iter_mut()) {
            *v = rng.sample(StandardNormal);
        }
    }
    p
}

fn terminal_error(e: crate::diffcore::DiffError, steps: usize) -> SolverError {
    match e.non_finite_row() {
        Some(sample) => SolverError::NonFiniteState {
            step: steps,
            sample,
            source: e,
        },
        None => SolverError::Diff(e),
    }
}

/// Shard-local sample indices become batch indices.
fn shift_sample(e: SolverError, offset: usize) -> SolverError {
    match e {
        SolverError::NonFiniteState {
            step,
            sample,
            source,
        } => SolverError::NonFiniteState {
            step,
            sample: sample + offset,
            source,
        },
        other => other,
    }
}

/// Unbiased variance of the trailing `window` values, once that many exist.
fn trailing_variance(values: &[f64], window: usize) -> Option<f64> {
    if values.len() < window || window < 2 {
        return None;
    }
    let tail = &values[values.len() - window..];
    let mean = tail.iter().sum::<f64>() / window as f64;
    Some(tail.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (window - 1) as f64)
}

/// Trains until the step cap, the trailing-variance rule, or divergence.
///
/// Record `k` (1-based) holds the loss and `Y_0` estimate of the forward pass
/// that precedes the `k`-th parameter update, plus the elapsed wall time.
pub fn train(problem: &dyn Fbsde, config: &TrainConfig) -> Result<RunReport, SolverError> {
    let mut trainer = Trainer::new(problem, config.clone())?;
    run_trainer(&mut trainer)
}

impl Trainer<'_> {
    /// Continues training from the current state; see [`train`].
    pub fn run(&mut self) -> Result<RunReport, SolverError> {
        run_trainer(self)
    }
}

fn run_trainer(trainer: &mut Trainer<'_>) -> Result<RunReport, SolverError> {
    let config = trainer.config.clone();
    let info = ProblemInfo::of(trainer.problem);
    let explicit = trainer
        .problem
        .explicit_y0()
        .and_then(|v| v.first().copied());
    let start = Instant::now();
    let mut records: Vec<IterRecord> = Vec::with_capacity(config.max_iterations);
    let mut y0s: Vec<f64> = Vec::with_capacity(config.max_iterations);
    let mut termination = Termination::MaxSteps;

    let diverged =
        |records: Vec<IterRecord>, iteration: usize, reason: String| SolverError::Diverged {
            iteration,
            reason,
            report: Box::new(RunReport::new(
                info.clone(),
                config.clone(),
                records,
                explicit,
                Termination::Diverged,
            )),
        };

    for k in 1..=config.max_iterations {
        let eval = match trainer.evaluate(true) {
            Ok(e) => e,
            Err(e @ (SolverError::NonFiniteState { .. } | SolverError::Diff(_))) => {
                return Err(diverged(records, k, e.to_string()));
            }
            Err(e) => return Err(e),
        };
        let record = IterRecord {
            iteration: k,
            loss: eval.loss,
            y0: eval.y0,
            elapsed: start.elapsed().as_secs_f64(),
        };
        if !eval.loss.is_finite() || eval.loss > config.divergence_threshold {
            let reason = format!(
                "loss {} exceeds the threshold {}",
                eval.loss, config.divergence_threshold
            );
            records.push(record);
            return Err(diverged(records, k, reason));
        }
        records.push(record);
        y0s.push(eval.y0);

        if let Some(threshold) = config.stop_variance {
            if trailing_variance(&y0s, config.stop_window).is_some_and(|v| v < threshold) {
                termination = Termination::Converged;
                break;
            }
        }

        match trainer.update(&eval) {
            Ok(()) => {}
            Err(e @ SolverError::Optim(_)) => return Err(diverged(records, k, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    Ok(RunReport::new(info, config, records, explicit, termination))
}
