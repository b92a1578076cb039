//! Newton iteration for the discrete Bratu system.
//!
//! Each step assembles `J(u)` and `R(u)` and solves `J du = −R` with
//! deflated GMRES(m). The deflation basis depends on `J`, so a fresh
//! deflator is built for every Newton step.

use std::io::Write;

use log::{debug, info};

use crate::assembly::Assembler;
use crate::deflation::{DeflationConfig, Deflator};
use crate::error::{Error, Result};
use crate::krylov::{gmres_restarted, GmresConfig, GmresReport, IdentityPreconditioner};
use crate::mesh::StructuredMesh;
use crate::parallel::Executor;
use crate::sparse::{norm2, norm_inf, CsrMatrix};

/// Default Bratu parameter.
pub const DEFAULT_LAMBDA: f64 = 6.8;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NewtonConfig {
    pub lambda: f64,
    /// Stop when `‖du‖∞` falls below this.
    pub update_norm_tol: f64,
    pub max_iterations: usize,
    pub gmres: GmresConfig,
    /// `None` runs plain GMRES(m).
    pub deflation: Option<DeflationConfig>,
    /// Walk λ up from 1 in four equal steps, solving at each.
    pub continuation: bool,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            update_norm_tol: 1e-8,
            max_iterations: 30,
            gmres: GmresConfig { m: 50, max_restarts: 100, tol: 1e-10, fixed_iterations: false },
            deflation: Some(DeflationConfig::default()),
            continuation: false,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        self.gmres.validate()?;
        if !(self.update_norm_tol > 0.0) || self.max_iterations == 0 || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("invalid Newton configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NewtonRecord {
    pub iter: usize,
    pub lambda: f64,
    pub update_inf_norm: f64,
    /// `‖R(u)‖₂` at the start of the iteration.
    pub residual_2norm: f64,
    pub gmres_restarts: usize,
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NewtonTrace {
    pub records: Vec<NewtonRecord>,
}

impl NewtonTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// CSV with columns `iter,update_inf_norm,residual_2norm,gmres_restarts`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iter", "update_inf_norm", "residual_2norm", "gmres_restarts"])?;
        for r in &self.records {
            out.write_record([
                r.iter.to_string(),
                format!("{:e}", r.update_inf_norm),
                format!("{:e}", r.residual_2norm),
                r.gmres_restarts.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NewtonSolution {
    pub u: Vec<f64>,
    pub trace: NewtonTrace,
    pub converged: bool,
    /// Why the iteration stopped early, when it did.
    pub failure: Option<String>,
}

/// Solves one linear Newton system `J du = b` from a zero initial guess.
pub fn solve_linear(
    j: &CsrMatrix,
    b: &[f64],
    gmres: &GmresConfig,
    deflation: Option<&DeflationConfig>,
    exec: &Executor,
) -> Result<(Vec<f64>, GmresReport, Option<Deflator>)> {
    let x0 = vec![0.0; b.len()];
    match deflation {
        Some(cfg) => {
            let mut d = Deflator::new(*cfg);
            let (x, rep) = gmres_restarted(j, &mut d, b, &x0, gmres, exec)?;
            Ok((x, rep, Some(d)))
        }
        None => {
            let (x, rep) = gmres_restarted(j, &mut IdentityPreconditioner, b, &x0, gmres, exec)?;
            Ok((x, rep, None))
        }
    }
}

pub fn newton_solve(mesh: &StructuredMesh, cfg: &NewtonConfig, exec: &Executor) -> Result<NewtonSolution> {
    cfg.validate()?;
    let asm = Assembler::new(mesh);
    let mut u = vec![0.0; mesh.n_nodes()];
    let mut trace = NewtonTrace::default();
    let lambdas: Vec<f64> = if cfg.continuation {
        (1..=4).map(|s| 1.0 + (cfg.lambda - 1.0) * (s - 1) as f64 / 3.0).collect()
    } else {
        vec![cfg.lambda]
    };
    for &lambda in &lambdas {
        info!("Newton solve at lambda = {lambda}");
        let mut converged = false;
        for iter in 1..=cfg.max_iterations {
            let r = asm.residual(&u, lambda, exec)?;
            let j = asm.jacobian(&u, lambda, exec)?;
            let b: Vec<f64> = r.iter().map(|v| -v).collect();
            let (du, rep, _) = solve_linear(&j, &b, &cfg.gmres, cfg.deflation.as_ref(), exec)?;
            let update = norm_inf(&du);
            trace.records.push(NewtonRecord {
                iter,
                lambda,
                update_inf_norm: update,
                residual_2norm: norm2(&r),
                gmres_restarts: rep.restarts_used,
            });
            debug!("newton {iter}: |du|_inf = {update:.3e}, |R| = {:.3e}, restarts = {}", norm2(&r), rep.restarts_used);
            if !rep.converged {
                return Ok(NewtonSolution {
                    u,
                    trace,
                    converged: false,
                    failure: Some(format!(
                        "GMRES stalled at Newton iteration {iter}: relative error {:.3e}",
                        rep.final_relative_error
                    )),
                });
            }
            crate::sparse::axpy_in_place(1.0, &du, &mut u);
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("Newton iterate"));
            }
            if update < cfg.update_norm_tol {
                converged = true;
                break;
            }
        }
        if !converged {
            let n = trace.len();
            return Ok(NewtonSolution {
                u,
                trace,
                converged: false,
                failure: Some(Error::NewtonNotConverged(n).to_string()),
            });
        }
    }
    Ok(NewtonSolution { u, trace, converged: true, failure: None })
}

/// Largest spread of `u` along any z-line.
pub fn z_variation(mesh: &StructuredMesh, u: &[f64]) -> f64 {
    let n = mesh.n_axis();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in 0..n {
            let (lo, hi) = (0..n)
                .map(|k| u[mesh.node_id(i, j, k)])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            worst = worst.max(hi - lo);
        }
    }
    worst
}

/// Largest deviation from mirror symmetry `i ↔ n−1−i` and `j ↔ n−1−j`.
pub fn mirror_asymmetry(mesh: &StructuredMesh, u: &[f64]) -> f64 {
    let n = mesh.n_axis();
    let mut worst = 0.0f64;
    for id in 0..mesh.n_nodes() {
        let (i, j, k) = mesh.node_index(id);
        worst = worst.max((u[id] - u[mesh.node_id(n - 1 - i, j, k)]).abs());
        worst = worst.max((u[id] - u[mesh.node_id(i, n - 1 - j, k)]).abs());
    }
    worst
}
