//! `fbsde`: train the FBSDE solvers from the command line.
//!
//! Exit codes: 0 success, 1 usage error (or a failed gradient check),
//! 2 divergence, 3 I/O error.

mod args;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use fbsde_core::exec::map_indexed;
use fbsde_core::fbsde::{problem_by_name, Fbsde, FbsdeError, ProblemParams};
use fbsde_core::report::{self, ReportError, RunReport};
use fbsde_core::solver::{self, Algorithm, SolverError, TrainConfig, Trainer};

use args::{Cli, Command, GradcheckArgs, ResidualArgs, Resolved};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Diverged(String),
    Io(String),
    CheckFailed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::CheckFailed(_) => 1,
            CliError::Diverged(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m)
            | CliError::Diverged(m)
            | CliError::Io(m)
            | CliError::CheckFailed(m) => m,
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<FbsdeError> for CliError {
    fn from(e: FbsdeError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::Diverged { .. } => CliError::Diverged(e.to_string()),
            SolverError::Nn(fbsde_core::nn::NnError::Io { .. }) => CliError::Io(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Run(a) => a.resolve().and_then(|r| run(&r)),
        Command::Repeat(a) => a.resolve().and_then(|r| repeat(&r)),
        Command::ResidualCheck(a) => residual_check(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn build_problem(name: &str, params: &ProblemParams) -> Result<Box<dyn Fbsde>, CliError> {
    Ok(problem_by_name(name, params)?)
}

fn describe(report: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "problem          {}", report.problem.name);
    let _ = writeln!(s, "algorithm        {}", report.config.algorithm.label());
    let _ = writeln!(s, "iterations       {}", report.iterations());
    let _ = writeln!(s, "termination      {}", report.termination.as_str());
    let _ = writeln!(s, "final Y0         {:.8}", report.final_y0);
    if let Some(e) = report.explicit_y0 {
        let _ = writeln!(s, "explicit Y0      {e:.8}");
    }
    if let Some(e) = report.relative_error {
        let _ = writeln!(s, "relative error   {e:.3e}");
    }
    let _ = write!(s, "runtime (s)      {:.2}", report.runtime());
    s
}

fn run(r: &Resolved) -> Result<(), CliError> {
    let problem = build_problem(&r.problem, &r.params)?;
    let mut trainer = Trainer::new(problem.as_ref(), r.train.clone())?;
    let outcome = trainer.run();
    let report = match &outcome {
        Ok(report) => report,
        Err(SolverError::Diverged { report, .. }) => report.as_ref(),
        Err(_) => return outcome.map(|_| ()).map_err(CliError::from),
    };
    report::emit_run(report, &r.out)?;
    trainer
        .model()
        .save(r.out.join("model"))
        .map_err(|e| CliError::Io(e.to_string()))?;
    println!("{}", describe(report));
    println!("output           {}", r.out.display());
    outcome.map(|_| ()).map_err(CliError::from)
}

fn default_checkpoints(reports: &[RunReport]) -> Vec<usize> {
    let shortest = reports.iter().map(RunReport::iterations).min().unwrap_or(0);
    let every: Vec<usize> = (1..)
        .map(|k| k * 1000)
        .take_while(|&s| s <= shortest)
        .collect();
    if every.is_empty() && shortest > 0 {
        vec![shortest]
    } else {
        every
    }
}

fn repeat(r: &Resolved) -> Result<(), CliError> {
    let seeds: Vec<u64> = match &r.seeds {
        Some(s) => s.clone(),
        None => (0..r.repeat as u64)
            .map(|i| r.train.seed.wrapping_add(i))
            .collect(),
    };
    if seeds.len() < 2 {
        return Err(CliError::Usage(format!(
            "repeat needs at least 2 runs, got {}",
            seeds.len()
        )));
    }
    if seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
        return Err(CliError::Usage("repeat seeds must all differ".into()));
    }
    let problem = build_problem(&r.problem, &r.params)?;
    let configs: Vec<TrainConfig> = seeds
        .iter()
        .map(|&seed| TrainConfig {
            seed,
            ..r.train.clone()
        })
        .collect();
    let outcomes = map_indexed(r.train.execution, configs.len(), |i| {
        solver::train(problem.as_ref(), &configs[i])
    });

    let mut reports = Vec::with_capacity(outcomes.len());
    let mut diverged = Vec::new();
    for (seed, outcome) in seeds.iter().zip(outcomes) {
        let report = match outcome {
            Ok(report) => report,
            Err(SolverError::Diverged { report, reason, .. }) => {
                diverged.push(format!("seed {seed}: {reason}"));
                *report
            }
            Err(e) => return Err(e.into()),
        };
        report::emit_run(&report, r.out.join(format!("run_seed{seed}")))?;
        reports.push(report);
    }
    if !diverged.is_empty() {
        return Err(CliError::Diverged(format!(
            "{} run(s) diverged: {}",
            diverged.len(),
            diverged.join("; ")
        )));
    }
    let checkpoints = r
        .checkpoints
        .clone()
        .unwrap_or_else(|| default_checkpoints(&reports));
    let summary = report::summarize(&reports, &checkpoints)?;
    report::emit_summary(&summary, &r.out)?;
    print!("{}", report::summary_csv(&summary));
    println!("output: {}", r.out.display());
    Ok(())
}

fn residual_check(a: ResidualArgs) -> Result<(), CliError> {
    let name = a
        .problem
        .problem
        .clone()
        .unwrap_or_else(|| "example3".into());
    let problem = build_problem(&name, &a.problem.params())?;
    let rows = solver::residual_check(problem.as_ref(), &a.steps, a.paths, a.seed)?;
    let mut csv = String::from("steps,residual\n");
    for row in &rows {
        let _ = writeln!(csv, "{},{:.16e}", row.steps, row.residual);
    }
    print!("{csv}");
    if let Some(out) = a.out {
        write_text(&out, "residuals.csv", &csv)?;
    }
    Ok(())
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    std::fs::create_dir_all(dir)
        .and_then(|_| std::fs::write(&path, text))
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let name = a
        .problem
        .problem
        .clone()
        .unwrap_or_else(|| "example3".into());
    let problem = build_problem(&name, &a.problem.params())?;
    let algorithms = match a.algorithm {
        Some(n) => vec![args::algorithm(n)?],
        None => Algorithm::ALL.to_vec(),
    };
    let mut failed = Vec::new();
    for alg in algorithms {
        let config = TrainConfig {
            algorithm: alg,
            time_steps: a.time_steps,
            samples: a.paths,
            seed: a.seed,
            ..TrainConfig::default()
        };
        let r = solver::gradcheck(problem.as_ref(), &config, a.max_entries)?;
        let worst = r.max_rel_error();
        let verdict = if worst <= a.tolerance { "ok" } else { "FAIL" };
        println!(
            "{}  entries {:>5}  max rel error {worst:.3e}  {verdict}",
            alg.label(),
            r.entries.len()
        );
        if worst > a.tolerance {
            failed.push(alg.label());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}
