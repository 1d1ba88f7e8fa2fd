//! Run records, multi-run statistics and file emission.
//!
//! A run directory holds
//!
//! - `loss_history.csv`: `iteration,loss,y0`, one row per iteration;
//! - `timing.csv`: `iteration,elapsed_seconds`;
//! - `run.toml`: problem, configuration, termination and final values.
//!
//! Wall time lives in its own file so that two runs with the same seed
//! produce byte-identical loss histories. Floats are written as `{:.16e}`
//! (17 significant digits) and parse back to the same bits.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fbsde::{Dims, Fbsde};
use crate::solver::TrainConfig;

pub const LOSS_HISTORY_FILE: &str = "loss_history.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const RUN_METADATA_FILE: &str = "run.toml";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CHECKPOINTS_FILE: &str = "checkpoints.csv";

const LOSS_HEADER: &str = "iteration,loss,y0";
const TIMING_HEADER: &str = "iteration,elapsed_seconds";
const SUMMARY_HEADER: &str =
    "algorithm,runs,mean_y0,variance_y0,explicit_y0,relative_error,mean_steps,mean_time_s";
const CHECKPOINT_HEADER: &str = "step,runs,mean_y0,variance_y0";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("cannot summarize: {0}")]
    Mismatch(String),
    #[error("checkpoint {step} is past the end of a run with {len} iterations")]
    Checkpoint { step: usize, len: usize },
    #[error("cannot summarize an empty list of runs")]
    NoRuns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInfo {
    pub name: String,
    pub dims: Dims,
    pub horizon: f64,
    pub x0: Vec<f64>,
}

impl ProblemInfo {
    pub fn of(problem: &dyn Fbsde) -> Self {
        Self {
            name: problem.name().to_string(),
            dims: problem.dims(),
            horizon: problem.horizon(),
            x0: problem.x0().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iteration: usize,
    pub loss: f64,
    pub y0: f64,
    /// Seconds since the start of training.
    pub elapsed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxSteps,
    Diverged,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::MaxSteps => "max_steps",
            Termination::Diverged => "diverged",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub problem: ProblemInfo,
    pub config: TrainConfig,
    pub records: Vec<IterRecord>,
    /// `Y_0` estimate of the last record (`NaN` for an empty run).
    pub final_y0: f64,
    pub explicit_y0: Option<f64>,
    pub relative_error: Option<f64>,
    pub termination: Termination,
}

pub fn relative_error(estimate: f64, exact: f64) -> Option<f64> {
    (exact != 0.0).then(|| (estimate - exact).abs() / exact.abs())
}

impl RunReport {
    pub fn new(
        problem: ProblemInfo,
        config: TrainConfig,
        records: Vec<IterRecord>,
        explicit_y0: Option<f64>,
        termination: Termination,
    ) -> Self {
        let final_y0 = records.last().map_or(f64::NAN, |r| r.y0);
        Self {
            problem,
            config,
            final_y0,
            relative_error: explicit_y0.and_then(|e| relative_error(final_y0, e)),
            explicit_y0,
            records,
            termination,
        }
    }

    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn runtime(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.elapsed)
    }

    fn y0_at(&self, step: usize) -> Result<f64, ReportError> {
        match step.checked_sub(1).and_then(|i| self.records.get(i)) {
            Some(r) => Ok(r.y0),
            None => Err(ReportError::Checkpoint {
                step,
                len: self.records.len(),
            }),
        }
    }
}

/// Mean and unbiased variance of a sample, independent of input order.
///
/// Values are sorted and shifted by their minimum before summing, so equal
/// inputs give a variance of exactly zero.
pub fn mean_variance(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let shift = v[0];
    let s1: f64 = v.iter().map(|x| x - shift).sum();
    let s2: f64 = v.iter().map(|x| (x - shift) * (x - shift)).sum();
    let mean = shift + s1 / n;
    let variance = if v.len() < 2 {
        0.0
    } else {
        ((s2 - s1 * s1 / n) / (n - 1.0)).max(0.0)
    };
    (mean, variance)
}

fn sorted_mean(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointStat {
    pub step: usize,
    pub mean: f64,
    pub variance: f64,
}

/// Row of a results table: one algorithm, `R` runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinalStat {
    pub mean_y0: f64,
    pub variance_y0: f64,
    pub explicit_y0: Option<f64>,
    pub relative_error: Option<f64>,
    pub mean_steps: f64,
    pub mean_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiRunSummary {
    pub problem: ProblemInfo,
    pub config: TrainConfig,
    pub runs: usize,
    pub checkpoints: Vec<CheckpointStat>,
    pub final_stat: FinalStat,
    pub mean_runtime: f64,
}

/// Statistics across runs that differ only in their seed.
pub fn summarize(
    reports: &[RunReport],
    checkpoints: &[usize],
) -> Result<MultiRunSummary, ReportError> {
    let first = reports.first().ok_or(ReportError::NoRuns)?;
    for r in &reports[1..] {
        if r.problem != first.problem {
            return Err(ReportError::Mismatch(format!(
                "problem {:?} differs from {:?}",
                r.problem, first.problem
            )));
        }
        if !r.config.same_experiment(&first.config) {
            return Err(ReportError::Mismatch(
                "configurations differ beyond the seed".into(),
            ));
        }
    }
    let mut stats = Vec::with_capacity(checkpoints.len());
    for &step in checkpoints {
        let values = reports
            .iter()
            .map(|r| r.y0_at(step))
            .collect::<Result<Vec<_>, _>>()?;
        let (mean, variance) = mean_variance(&values);
        stats.push(CheckpointStat {
            step,
            mean,
            variance,
        });
    }
    let finals: Vec<f64> = reports.iter().map(|r| r.final_y0).collect();
    let (mean_y0, variance_y0) = mean_variance(&finals);
    let times: Vec<f64> = reports.iter().map(RunReport::runtime).collect();
    let steps: Vec<f64> = reports.iter().map(|r| r.iterations() as f64).collect();
    let mean_time = sorted_mean(&times);
    Ok(MultiRunSummary {
        problem: first.problem.clone(),
        config: first.config.clone(),
        runs: reports.len(),
        checkpoints: stats,
        final_stat: FinalStat {
            mean_y0,
            variance_y0,
            explicit_y0: first.explicit_y0,
            relative_error: first.explicit_y0.and_then(|e| relative_error(mean_y0, e)),
            mean_steps: sorted_mean(&steps),
            mean_time,
        },
        mean_runtime: mean_time,
    })
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn write_file(path: &Path, contents: &str) -> Result<(), ReportError> {
    fs::write(path, contents).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_file(path: &Path) -> Result<String, ReportError> {
    fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn create_dir(dir: &Path) -> Result<(), ReportError> {
    fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.display().to_string(),
        source,
    })
}

pub fn loss_history_csv(records: &[IterRecord]) -> String {
    let mut s = String::with_capacity(64 * (records.len() + 1));
    s.push_str(LOSS_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{},{},{}", r.iteration, num(r.loss), num(r.y0));
    }
    s
}

pub fn timing_csv(records: &[IterRecord]) -> String {
    let mut s = String::from(TIMING_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{},{}", r.iteration, num(r.elapsed));
    }
    s
}

#[derive(Debug, Serialize, Deserialize)]
struct RunMetadata {
    termination: Termination,
    iterations: usize,
    final_y0: f64,
    explicit_y0: Option<f64>,
    relative_error: Option<f64>,
    problem: ProblemInfo,
    config: TrainConfig,
}

fn metadata_toml(report: &RunReport) -> String {
    let meta = RunMetadata {
        termination: report.termination,
        iterations: report.iterations(),
        final_y0: report.final_y0,
        explicit_y0: report.explicit_y0,
        relative_error: report.relative_error,
        problem: report.problem.clone(),
        config: report.config.clone(),
    };
    toml::to_string(&meta).expect("run metadata is representable as TOML")
}

/// Writes the three run files into `dir`, creating it if needed.
pub fn emit_run(report: &RunReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, ReportError> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let files = [
        (LOSS_HISTORY_FILE, loss_history_csv(&report.records)),
        (TIMING_FILE, timing_csv(&report.records)),
        (RUN_METADATA_FILE, metadata_toml(report)),
    ];
    let mut written = Vec::with_capacity(files.len());
    for (name, contents) in files {
        let path = dir.join(name);
        write_file(&path, &contents)?;
        written.push(path);
    }
    Ok(written)
}

fn parse_csv<T>(
    path: &Path,
    header: &str,
    parse_row: impl Fn(&[&str]) -> Option<T>,
) -> Result<Vec<T>, ReportError> {
    let text = read_file(path)?;
    let fail = |line: usize, reason: &str| ReportError::Parse {
        path: path.display().to_string(),
        line,
        reason: reason.to_string(),
    };
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(fail(1, &format!("expected header '{header}'")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            parse_row(&fields).ok_or_else(|| fail(i + 2, "malformed row"))
        })
        .collect()
}

/// Reads `loss_history.csv` back as `(iteration, loss, y0)` rows.
pub fn read_loss_history(path: impl AsRef<Path>) -> Result<Vec<(usize, f64, f64)>, ReportError> {
    parse_csv(path.as_ref(), LOSS_HEADER, |f| match f {
        [i, l, y] => Some((i.parse().ok()?, l.parse().ok()?, y.parse().ok()?)),
        _ => None,
    })
}

/// Reconstructs a report from a run directory written by [`emit_run`].
pub fn read_run(dir: impl AsRef<Path>) -> Result<RunReport, ReportError> {
    let dir = dir.as_ref();
    let losses = read_loss_history(dir.join(LOSS_HISTORY_FILE))?;
    let times: Vec<(usize, f64)> = parse_csv(&dir.join(TIMING_FILE), TIMING_HEADER, |f| match f {
        [i, t] => Some((i.parse().ok()?, t.parse().ok()?)),
        _ => None,
    })?;
    let meta_path = dir.join(RUN_METADATA_FILE);
    let meta: RunMetadata =
        toml::from_str(&read_file(&meta_path)?).map_err(|e| ReportError::Parse {
            path: meta_path.display().to_string(),
            line: 0,
            reason: e.to_string(),
        })?;
    if losses.len() != times.len() || losses.len() != meta.iterations {
        return Err(ReportError::Parse {
            path: dir.display().to_string(),
            line: 0,
            reason: "loss history, timing and metadata disagree on the iteration count".into(),
        });
    }
    let records = losses
        .into_iter()
        .zip(times)
        .map(|((iteration, loss, y0), (_, elapsed))| IterRecord {
            iteration,
            loss,
            y0,
            elapsed,
        })
        .collect();
    let mut report = RunReport::new(
        meta.problem,
        meta.config,
        records,
        meta.explicit_y0,
        meta.termination,
    );
    report.final_y0 = meta.final_y0;
    report.relative_error = meta.relative_error;
    Ok(report)
}

pub fn summary_csv(summary: &MultiRunSummary) -> String {
    let f = &summary.final_stat;
    format!(
        "{SUMMARY_HEADER}\n{},{},{},{},{},{},{},{}\n",
        summary.config.algorithm.label(),
        summary.runs,
        num(f.mean_y0),
        num(f.variance_y0),
        opt_num(f.explicit_y0),
        opt_num(f.relative_error),
        num(f.mean_steps),
        num(f.mean_time),
    )
}

pub fn checkpoints_csv(summary: &MultiRunSummary) -> String {
    let mut s = String::from(CHECKPOINT_HEADER);
    s.push('\n');
    for c in &summary.checkpoints {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            c.step,
            summary.runs,
            num(c.mean),
            num(c.variance)
        );
    }
    s
}

/// Writes `summary.csv` and `checkpoints.csv` into `dir`.
pub fn emit_summary(
    summary: &MultiRunSummary,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>, ReportError> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let mut written = Vec::new();
    for (name, contents) in [
        (SUMMARY_FILE, summary_csv(summary)),
        (CHECKPOINTS_FILE, checkpoints_csv(summary)),
    ] {
        let path = dir.join(name);
        write_file(&path, &contents)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::Algorithm;

    fn info() -> ProblemInfo {
        ProblemInfo {
            name: "example3".into(),
            dims: Dims { n: 1, m: 1, d: 1 },
            horizon: 0.1,
            x0: vec![1.0],
        }
    }

    fn report(seed: u64, y0s: &[f64]) -> RunReport {
        let config = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let records = y0s
            .iter()
            .enumerate()
            .map(|(i, &y0)| IterRecord {
                iteration: i + 1,
                loss: 1.0 / (i + 1) as f64,
                y0,
                elapsed: 0.1 * (i + 1) as f64,
            })
            .collect();
        RunReport::new(
            info(),
            config,
            records,
            Some(1.0f64.sin()),
            Termination::MaxSteps,
        )
    }

    #[test]
    fn relative_error_uses_last_estimate() {
        let r = report(1, &[0.1, 0.8]);
        assert_eq!(r.final_y0, 0.8);
        let e = r.relative_error.unwrap();
        assert!((e - (0.8 - 1.0f64.sin()).abs() / 1.0f64.sin()).abs() < 1e-15);
        assert_eq!(relative_error(1.0, 0.0), None);
    }

    #[test]
    fn identical_runs_have_zero_variance() {
        let runs: Vec<_> = (0..4).map(|s| report(s, &[0.1, 0.3, 0.7])).collect();
        let s = summarize(&runs, &[1, 2, 3]).unwrap();
        assert!(s.checkpoints.iter().all(|c| c.variance == 0.0));
        assert_eq!(s.final_stat.variance_y0, 0.0);
        assert_eq!(s.final_stat.mean_steps, 3.0);
    }

    #[test]
    fn two_run_statistics() {
        let s = summarize(&[report(1, &[0.4]), report(2, &[0.6])], &[1]).unwrap();
        assert!((s.checkpoints[0].mean - 0.5).abs() < 1e-15);
        assert!((s.checkpoints[0].variance - 0.02).abs() < 1e-15);
    }

    #[test]
    fn summary_is_permutation_invariant() {
        let runs: Vec<_> = [0.11, 0.93, 0.47, 0.5, 0.123456789]
            .iter()
            .enumerate()
            .map(|(i, &v)| report(i as u64, &[v, v * 0.5]))
            .collect();
        let a = summarize(&runs, &[1, 2]).unwrap();
        let mut rev = runs.clone();
        rev.reverse();
        rev.swap(0, 2);
        let b = summarize(&rev, &[1, 2]).unwrap();
        assert_eq!(a.checkpoints, b.checkpoints);
        assert_eq!(a.final_stat, b.final_stat);
    }

    #[test]
    fn summarize_rejects_mismatch_and_short_runs() {
        let mut other = report(2, &[0.5]);
        other.config.algorithm = Algorithm::StateFeedback;
        assert!(matches!(
            summarize(&[report(1, &[0.5]), other], &[1]),
            Err(ReportError::Mismatch(_))
        ));
        assert!(matches!(
            summarize(&[report(1, &[0.5])], &[2]),
            Err(ReportError::Checkpoint { step: 2, len: 1 })
        ));
        assert!(matches!(summarize(&[], &[]), Err(ReportError::NoRuns)));
    }

    #[test]
    fn run_files_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let r = report(9, &[0.1, 1.0 / 3.0, std::f64::consts::PI, 1e-300]);
        emit_run(&r, dir.path()).unwrap();
        let back = read_run(dir.path()).unwrap();
        assert_eq!(back, r);
        for (a, b) in back.records.iter().zip(&r.records) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            assert_eq!(a.y0.to_bits(), b.y0.to_bits());
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let r = report(1, &[]);
        emit_run(&r, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(LOSS_HISTORY_FILE)).unwrap();
        assert_eq!(text, "iteration,loss,y0\n");
        assert!(read_loss_history(dir.path().join(LOSS_HISTORY_FILE))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn line_count_matches_iterations() {
        let r = report(1, &vec![0.5; 3000]);
        assert_eq!(loss_history_csv(&r.records).lines().count(), 3001);
    }

    #[test]
    fn io_errors_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = emit_run(&report(1, &[0.5]), blocker.join("sub")).unwrap_err();
        assert!(err.to_string().contains("file"));
    }

    #[test]
    fn summary_table_schema() {
        let s = summarize(&[report(1, &[0.4, 0.8]), report(2, &[0.6, 0.84])], &[1, 2]).unwrap();
        let csv = summary_csv(&s);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(SUMMARY_HEADER));
        assert!(lines.next().unwrap().starts_with("Alg 3,2,"));
        assert_eq!(checkpoints_csv(&s).lines().count(), 3);
    }
}
