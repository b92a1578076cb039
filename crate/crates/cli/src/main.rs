mod config;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use log::{error, warn};
use pgmres::experiments::{self, ConvergenceParams, SpeedupParams};
use pgmres::{DeflationConfig, Executor, GmresConfig, NewtonConfig};
use serde::Serialize;

use config::{BenchmarkSpec, Cli, Command};

/// Exit statuses.
const SOLVER_FAILURE: u8 = 1;
const USAGE: u8 = 2;

enum Failure {
    Usage(String),
    Solver(String),
}

impl From<pgmres::Error> for Failure {
    fn from(e: pgmres::Error) -> Self {
        Failure::Solver(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Solver(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(USAGE)
        }
        Err(Failure::Solver(msg)) => {
            error!("{msg}");
            eprintln!("error: {msg}");
            ExitCode::from(SOLVER_FAILURE)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = cli.config.as_deref().map(config::read_config).transpose().map_err(Failure::Usage)?;
    let spec = BenchmarkSpec::resolve(cli.command, cli.options, file).map_err(Failure::Usage)?;
    match spec.subcommand {
        Command::Sparsity => sparsity(&spec),
        Command::Convergence => convergence(&spec),
        Command::Speedup => speedup(&spec),
        Command::Solve => solve(&spec),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| Failure::Solver(format!("{}: {e}", p.display())))?)),
        None => Box::new(io::stdout().lock()),
    })
}

/// `dir/name.csv` → `dir/name_<suffix>.csv`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    path.with_file_name(format!("{stem}_{suffix}{ext}"))
}

/// JSON mirror: every record carries the full resolved configuration.
fn write_json<T: Serialize>(spec: &BenchmarkSpec, records: &[T]) -> Result<(), Failure> {
    let Some(path) = &spec.json else { return Ok(()) };
    let config = serde_json::to_value(spec).map_err(|e| Failure::Solver(e.to_string()))?;
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let mut v = serde_json::to_value(r).map_err(|e| Failure::Solver(e.to_string()))?;
        if let serde_json::Value::Object(map) = &mut v {
            map.insert("config".into(), config.clone());
        }
        out.push(v);
    }
    let w = output(Some(path))?;
    serde_json::to_writer_pretty(w, &serde_json::json!({ "config": config, "records": out }))
        .map_err(|e| Failure::Solver(e.to_string()))
}

fn gmres(spec: &BenchmarkSpec) -> GmresConfig {
    GmresConfig { m: spec.m, max_restarts: spec.restarts, tol: 1e-8, fixed_iterations: spec.fixed_iterations }
}

fn deflation(spec: &BenchmarkSpec) -> DeflationConfig {
    DeflationConfig { r_max: spec.rmax, ..Default::default() }
}

fn sparsity(spec: &BenchmarkSpec) -> Result<(), Failure> {
    let mut rows = Vec::new();
    let mut failed = false;
    for &n_e in &spec.ne {
        match experiments::sparsity_row(n_e) {
            Ok(r) => rows.push(r),
            Err(e) => {
                warn!("n_e = {n_e}: {e}");
                eprintln!("n_e = {n_e}: {e}");
                failed = true;
            }
        }
    }
    experiments::write_sparsity_csv(&rows, output(spec.out.as_deref())?)?;
    write_json(spec, &rows)?;
    if failed {
        return Err(Failure::Solver("some sizes could not be counted".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct ConvergenceRecord<'a> {
    variant: &'a str,
    n_e: usize,
    seconds: f64,
    relative_error: f64,
    explicit_residual: &'a [f64],
    deflation: &'a [pgmres::deflation::DeflationRecord],
}

fn convergence(spec: &BenchmarkSpec) -> Result<(), Failure> {
    let params = ConvergenceParams { lambda: spec.lambda, gmres: gmres(spec), deflation: deflation(spec), audit: false };
    let (n_e, p, mode) = (spec.ne[0], spec.threads[0], spec.mode());
    let runs = experiments::convergence(n_e, &params, |mesh| Executor::for_mesh(mesh, p, mode))?;
    experiments::write_convergence_csv(&runs, output(spec.out.as_deref())?)?;
    let records: Vec<_> = runs
        .iter()
        .map(|r| ConvergenceRecord {
            variant: r.variant.as_str(),
            n_e,
            seconds: r.seconds,
            relative_error: r.relative_error(),
            explicit_residual: &r.report.explicit,
            deflation: &r.deflation,
        })
        .collect();
    write_json(spec, &records)
}

fn speedup(spec: &BenchmarkSpec) -> Result<(), Failure> {
    let params = SpeedupParams {
        n_e: spec.ne.clone(),
        threads: spec.threads.clone(),
        reps: spec.reps,
        lambda: spec.lambda,
        gmres: gmres(spec),
        deflation: Some(deflation(spec)),
        mode: spec.mode(),
    };
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    if let Some(&p) = spec.threads.iter().max() {
        if p > cores {
            warn!("{p} workers on {cores} cores: timings will not show speedup");
        }
    }
    let rows = experiments::speedup(&params)?;
    experiments::write_speedup_csv(&rows, output(spec.out.as_deref())?)?;
    if let Some(out) = &spec.out {
        experiments::write_breakdown_csv(&rows, output(Some(&sibling(out, "breakdown")))?)?;
    }
    write_json(spec, &rows)
}

fn solve(spec: &BenchmarkSpec) -> Result<(), Failure> {
    let cfg = NewtonConfig {
        lambda: spec.lambda,
        gmres: GmresConfig { tol: 1e-10, ..gmres(spec) },
        deflation: Some(deflation(spec)),
        continuation: spec.continuation,
        ..Default::default()
    };
    let (_, sol) = experiments::solve(spec.ne[0], &cfg, spec.threads[0], spec.mode())?;
    let out = spec.out.clone().unwrap_or_else(|| PathBuf::from("solution.bin"));
    let trace_path = out.with_extension("trace.csv");
    sol.trace.write_csv(output(Some(&trace_path))?)?;
    write_json(spec, &sol.trace.records)?;
    if !sol.converged {
        return Err(Failure::Solver(sol.failure.unwrap_or_else(|| "Newton iteration failed".into())));
    }
    experiments::write_solution(&sol.u, output(Some(&out))?)?;
    Ok(())
}
