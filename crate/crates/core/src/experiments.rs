//! Benchmark experiments behind the command-line driver.
//!
//! Each experiment returns plain records and has a CSV writer. Floats are
//! written in shortest round-trip form so derived columns can be recomputed
//! exactly from a report.

use std::io::Write;
use std::time::Instant;

use log::info;

use crate::assembly::Assembler;
use crate::deflation::{DeflationConfig, DeflationRecord, Deflator};
use crate::error::Result;
use crate::krylov::{gmres_restarted, CycleInfo, GmresConfig, GmresReport, IdentityPreconditioner, LinearOperator, Preconditioner};
use crate::mesh::StructuredMesh;
use crate::nonlinear::{NewtonConfig, NewtonSolution};
use crate::parallel::{coupled_lines, Executor, ReductionMode, TimingBreakdown};
use crate::sparse::{memory_footprint, CsrMatrix};

const MIB: f64 = 1024.0 * 1024.0;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SparsityRow {
    pub n_e: usize,
    pub dof: usize,
    /// `dof²`.
    pub matrix_elements: f64,
    pub nnz: usize,
    /// `nnz / dof²`.
    pub sparsity: f64,
    /// CSR footprint: 12 bytes per stored entry plus the row offsets.
    pub memory_mib: f64,
}

/// Stored entries of the Jacobian, counted row by row without building it.
///
/// Constraint rows hold only their diagonal; any other row couples to the
/// box of nodes sharing an element with it.
pub fn count_nnz(mesh: &StructuredMesh) -> usize {
    let n = mesh.n_axis();
    let width: Vec<usize> = (0..n).map(|i| coupled_lines(mesh, i).len()).collect();
    let xy_interior: usize = (1..n - 1).map(|j| (1..n - 1).map(|i| width[i] * width[j]).sum::<usize>()).sum();
    let z_total: usize = width.iter().sum();
    let boundary_per_plane = n * n - (n - 2) * (n - 2);
    xy_interior * z_total + boundary_per_plane * n
}

pub fn sparsity_row(n_e: usize) -> Result<SparsityRow> {
    let mesh = StructuredMesh::new(n_e)?;
    let dof = mesh.n_nodes();
    let nnz = count_nnz(&mesh);
    let elements = dof as f64 * dof as f64;
    Ok(SparsityRow {
        n_e,
        dof,
        matrix_elements: elements,
        nnz,
        sparsity: nnz as f64 / elements,
        memory_mib: memory_footprint(dof, nnz) as f64 / MIB,
    })
}

pub fn write_sparsity_csv<W: Write>(rows: &[SparsityRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["dof", "matrix_elements", "nnz", "sparsity", "memory_mib"])?;
    for r in rows {
        out.write_record([
            r.dof.to_string(),
            r.matrix_elements.to_string(),
            r.nnz.to_string(),
            r.sparsity.to_string(),
            r.memory_mib.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// `J(u)` and `−R(u)`: the Newton system at `u`.
pub fn newton_system(mesh: &StructuredMesh, u: &[f64], lambda: f64, exec: &Executor) -> Result<(CsrMatrix, Vec<f64>)> {
    let asm = Assembler::new(mesh);
    let j = asm.jacobian(u, lambda, exec)?;
    let mut b = asm.residual(u, lambda, exec)?;
    b.iter_mut().for_each(|v| *v = -*v);
    Ok((j, b))
}

/// First Newton system, at `u = 0`.
pub fn first_newton_system(mesh: &StructuredMesh, lambda: f64, exec: &Executor) -> Result<(CsrMatrix, Vec<f64>)> {
    newton_system(mesh, &vec![0.0; mesh.n_nodes()], lambda, exec)
}

/// Deflator state after one restart.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DeflatorAudit {
    pub restart: usize,
    pub rank: usize,
    /// `‖UᵀU − I‖_max`.
    pub orthonormality: f64,
    /// `‖T − Uᵀ(AU)‖_max`.
    pub consistency: f64,
    /// `‖T‖_max`.
    pub t_max: f64,
}

/// Deflator that checks its own invariants after every update.
#[derive(Debug)]
pub struct AuditedDeflator {
    pub inner: Deflator,
    pub audits: Vec<DeflatorAudit>,
}

impl AuditedDeflator {
    pub fn new(cfg: DeflationConfig) -> Self {
        Self { inner: Deflator::new(cfg), audits: Vec::new() }
    }
}

impl Preconditioner for AuditedDeflator {
    fn apply(&self, v: &[f64], out: &mut [f64], exec: &Executor) -> Result<()> {
        self.inner.apply_to(v, out, exec)
    }

    fn end_of_cycle(&mut self, cycle: &CycleInfo<'_>, a: &dyn LinearOperator, exec: &Executor) -> Result<()> {
        self.inner.end_of_cycle(cycle, a, exec)?;
        self.audits.push(DeflatorAudit {
            restart: cycle.restart,
            rank: self.inner.rank(),
            orthonormality: self.inner.orthonormality_error(),
            consistency: self.inner.consistency_error(a, exec)?,
            t_max: self.inner.t().amax(),
        });
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Deflated,
    Plain,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Deflated => "deflated",
            Variant::Plain => "plain",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvergenceRun {
    pub variant: Variant,
    pub report: GmresReport,
    pub seconds: f64,
    /// Empty for the plain run.
    pub deflation: Vec<DeflationRecord>,
    pub audits: Vec<DeflatorAudit>,
}

impl ConvergenceRun {
    /// `‖r‖₂ / ‖r₀‖₂` after the last restart.
    pub fn relative_error(&self) -> f64 {
        let r0 = self.report.initial_residual();
        if r0 == 0.0 {
            0.0
        } else {
            self.report.final_residual() / r0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConvergenceParams {
    pub lambda: f64,
    pub gmres: GmresConfig,
    pub deflation: DeflationConfig,
    /// Check the deflator after each restart; costs `r` extra products per restart.
    pub audit: bool,
}

impl Default for ConvergenceParams {
    fn default() -> Self {
        Self {
            lambda: crate::nonlinear::DEFAULT_LAMBDA,
            gmres: GmresConfig { m: 50, max_restarts: 100, tol: 1e-8, fixed_iterations: true },
            deflation: DeflationConfig::default(),
            audit: false,
        }
    }
}

/// Runs GMRES on `J x = b` from zero with the given variant.
pub fn run_variant(j: &CsrMatrix, b: &[f64], variant: Variant, params: &ConvergenceParams, exec: &Executor) -> Result<ConvergenceRun> {
    let x0 = vec![0.0; b.len()];
    let start = Instant::now();
    let run = match variant {
        Variant::Plain => {
            let (_, report) = gmres_restarted(j, &mut IdentityPreconditioner, b, &x0, &params.gmres, exec)?;
            ConvergenceRun { variant, report, seconds: 0.0, deflation: Vec::new(), audits: Vec::new() }
        }
        Variant::Deflated if params.audit => {
            let mut d = AuditedDeflator::new(params.deflation);
            let (_, report) = gmres_restarted(j, &mut d, b, &x0, &params.gmres, exec)?;
            ConvergenceRun { variant, report, seconds: 0.0, deflation: d.inner.records().to_vec(), audits: d.audits }
        }
        Variant::Deflated => {
            let mut d = Deflator::new(params.deflation);
            let (_, report) = gmres_restarted(j, &mut d, b, &x0, &params.gmres, exec)?;
            ConvergenceRun { variant, report, seconds: 0.0, deflation: d.records().to_vec(), audits: Vec::new() }
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    info!("{} run: {} restarts, relative error {:.3e}, {seconds:.1} s", variant.as_str(), run.report.restarts_used, run.relative_error());
    Ok(ConvergenceRun { seconds, ..run })
}

/// Deflated and plain runs on the first Newton system of an `n_e` mesh.
pub fn convergence(n_e: usize, params: &ConvergenceParams, exec_for: impl Fn(&StructuredMesh) -> Result<Executor>) -> Result<[ConvergenceRun; 2]> {
    let mesh = StructuredMesh::new(n_e)?;
    let exec = exec_for(&mesh)?;
    let (j, b) = first_newton_system(&mesh, params.lambda, &exec)?;
    let deflated = run_variant(&j, &b, Variant::Deflated, params, &exec)?;
    let plain = run_variant(&j, &b, Variant::Plain, params, &exec)?;
    Ok([deflated, plain])
}

/// CSV with columns `restart,explicit_residual,variant`.
pub fn write_convergence_csv<W: Write>(runs: &[ConvergenceRun], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["restart", "explicit_residual", "variant"])?;
    for run in runs {
        for (j, r) in run.report.explicit.iter().enumerate() {
            out.write_record([j.to_string(), r.to_string(), run.variant.as_str().to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpeedupParams {
    pub n_e: Vec<usize>,
    pub threads: Vec<usize>,
    /// Timed repetitions after one discarded warm-up run.
    pub reps: usize,
    pub lambda: f64,
    pub gmres: GmresConfig,
    /// `None` times plain GMRES.
    pub deflation: Option<DeflationConfig>,
    pub mode: ReductionMode,
}

impl Default for SpeedupParams {
    fn default() -> Self {
        Self {
            n_e: vec![15, 25, 30, 35, 40, 45, 50, 55, 60],
            threads: vec![1, 2, 4],
            reps: 3,
            lambda: crate::nonlinear::DEFAULT_LAMBDA,
            gmres: GmresConfig { m: 50, max_restarts: 100, tol: 1e-8, fixed_iterations: true },
            deflation: Some(DeflationConfig::default()),
            mode: ReductionMode::Deterministic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpeedupRow {
    pub n_e: usize,
    pub dof: usize,
    pub p: usize,
    pub median_s: f64,
    /// `T₁ / T_p`.
    pub speedup: f64,
    pub compute_pct: f64,
    pub local_comm_pct: f64,
    pub global_comm_pct: f64,
    /// `T_slowest / T_p` over the thread counts run at this size.
    pub relative_speed: f64,
}

/// One benchmark solve: a single Newton step at `u = 0`, assembly included.
pub fn benchmark_solve(mesh: &StructuredMesh, params: &SpeedupParams, exec: &Executor) -> Result<GmresReport> {
    let (j, b) = first_newton_system(mesh, params.lambda, exec)?;
    let deflation = params.deflation.as_ref();
    let (_, report, _) = crate::nonlinear::solve_linear(&j, &b, &params.gmres, deflation, exec)?;
    Ok(report)
}

/// Median of a nonempty sample.
pub fn median(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Rough peak memory of [`benchmark_solve`]: the Jacobian and its pattern,
/// the Krylov basis, the deflation panels, and a few work vectors.
pub fn benchmark_memory_estimate(mesh: &StructuredMesh, params: &SpeedupParams) -> usize {
    let n = mesh.n_nodes();
    let r = params.deflation.map_or(0, |d| 2 * (d.r_max + d.per_restart));
    2 * memory_footprint(n, count_nnz(mesh)) + (params.gmres.m + 1 + r + 8) * n * 8
}

/// `MemAvailable` from `/proc/meminfo`, where that exists.
pub fn available_memory() -> Option<usize> {
    let info = std::fs::read_to_string("/proc/meminfo").ok()?;
    let line = info.lines().find(|l| l.starts_with("MemAvailable:"))?;
    let kib: usize = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kib * 1024)
}

/// Times [`benchmark_solve`] at every size and thread count.
///
/// `p = 1` is always run first at each size to provide the baseline.
/// Sizes whose mesh cannot be built, or whose estimated footprint exceeds
/// the available memory, are skipped with a warning.
pub fn speedup(params: &SpeedupParams) -> Result<Vec<SpeedupRow>> {
    let mut threads: Vec<usize> = params.threads.iter().copied().filter(|&p| p != 1).collect();
    threads.sort_unstable();
    threads.dedup();
    threads.insert(0, 1);
    let reps = params.reps.max(1);
    let mut rows = Vec::new();
    for &n_e in &params.n_e {
        let mesh = match StructuredMesh::new(n_e) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("skipping n_e = {n_e}: {e}");
                continue;
            }
        };
        let need = benchmark_memory_estimate(&mesh, params);
        if let Some(avail) = available_memory() {
            if need > avail {
                log::warn!("skipping n_e = {n_e}: needs about {:.0} MiB, {:.0} MiB available", need as f64 / MIB, avail as f64 / MIB);
                continue;
            }
        }
        let first = rows.len();
        let mut t1 = None;
        for &p in &threads {
            if p > mesh.n_axis() {
                log::warn!("skipping p = {p} at n_e = {n_e}: more workers than node planes");
                continue;
            }
            let exec = Executor::for_mesh(&mesh, p, params.mode)?;
            benchmark_solve(&mesh, params, &exec)?;
            exec.reset_timing();
            let mut times = Vec::with_capacity(reps);
            for _ in 0..reps {
                let start = Instant::now();
                benchmark_solve(&mesh, params, &exec)?;
                times.push(start.elapsed().as_secs_f64());
            }
            let median_s = median(&times);
            let base = *t1.get_or_insert(median_s);
            let (c, l, g) = exec.timing().percentages();
            info!("n_e = {n_e}, p = {p}: median {median_s:.3} s");
            rows.push(SpeedupRow {
                n_e,
                dof: mesh.n_nodes(),
                p,
                median_s,
                speedup: base / median_s,
                compute_pct: c,
                local_comm_pct: l,
                global_comm_pct: g,
                relative_speed: 1.0,
            });
        }
        let slowest = rows[first..].iter().map(|r| r.median_s).fold(0.0, f64::max);
        for r in &mut rows[first..] {
            r.relative_speed = slowest / r.median_s;
        }
    }
    Ok(rows)
}

/// CSV with columns `dof,p,median_s,speedup,compute_pct,local_comm_pct,global_comm_pct,relative_speed`.
pub fn write_speedup_csv<W: Write>(rows: &[SpeedupRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "dof",
        "p",
        "median_s",
        "speedup",
        "compute_pct",
        "local_comm_pct",
        "global_comm_pct",
        "relative_speed",
    ])?;
    for r in rows {
        out.write_record([
            r.dof.to_string(),
            r.p.to_string(),
            r.median_s.to_string(),
            r.speedup.to_string(),
            r.compute_pct.to_string(),
            r.local_comm_pct.to_string(),
            r.global_comm_pct.to_string(),
            r.relative_speed.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// CSV with columns `dof,p,compute_pct,local_comm_pct,global_comm_pct`.
pub fn write_breakdown_csv<W: Write>(rows: &[SpeedupRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["dof", "p", "compute_pct", "local_comm_pct", "global_comm_pct"])?;
    for r in rows {
        out.write_record([
            r.dof.to_string(),
            r.p.to_string(),
            r.compute_pct.to_string(),
            r.local_comm_pct.to_string(),
            r.global_comm_pct.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Breakdown of a single timed run, for callers that drive their own loop.
pub fn timed<T>(exec: &Executor, f: impl FnOnce() -> Result<T>) -> Result<(T, TimingBreakdown)> {
    exec.reset_timing();
    let out = f()?;
    Ok((out, exec.timing()))
}

/// Full Newton solve on an `n_e` mesh.
pub fn solve(n_e: usize, cfg: &NewtonConfig, threads: usize, mode: ReductionMode) -> Result<(StructuredMesh, NewtonSolution)> {
    let mesh = StructuredMesh::new(n_e)?;
    let exec = Executor::for_mesh(&mesh, threads, mode)?;
    let sol = crate::nonlinear::newton_solve(&mesh, cfg, &exec)?;
    Ok((mesh, sol))
}

/// Binary solution file: little-endian `u64` length, then `f64` values in node order.
pub fn write_solution<W: Write>(u: &[f64], mut w: W) -> Result<()> {
    w.write_all(&(u.len() as u64).to_le_bytes())?;
    for v in u {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_solution`].
pub fn read_solution(bytes: &[u8]) -> Result<Vec<f64>> {
    let bad = || crate::error::Error::InvalidSize(format!("solution file of {} bytes", bytes.len()));
    let (head, body) = bytes.split_at_checked(8).ok_or_else(bad)?;
    let n = u64::from_le_bytes(head.try_into().unwrap()) as usize;
    if body.len() != n.checked_mul(8).ok_or_else(bad)? {
        return Err(bad());
    }
    Ok(body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}
