//! Right-preconditioned restarted GMRES(m).
//!
//! Each cycle builds an orthonormal basis of the Krylov space of `A M⁻¹`
//! with modified Gram–Schmidt Arnoldi, reduces the Hessenberg matrix to
//! triangular form with Givens rotations as it grows (so the residual norm
//! of the current iterate is available as `|g[k+1]|` without forming it),
//! and at the end of the cycle updates `x ← x + M⁻¹ V_k y_k`.
//! The preconditioner sees the square Hessenberg matrix and the basis of
//! every finished cycle before the basis is overwritten.

use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;

use crate::error::{check_len, Error, Result};
use crate::parallel::Executor;
use crate::sparse::CsrMatrix;

/// A square linear map applied through the worker layer.
pub trait LinearOperator {
    fn n(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64], exec: &Executor) -> Result<()>;
}

impl<T: LinearOperator + ?Sized> LinearOperator for &T {
    fn n(&self) -> usize {
        (**self).n()
    }

    fn apply(&self, x: &[f64], y: &mut [f64], exec: &Executor) -> Result<()> {
        (**self).apply(x, y, exec)
    }
}

impl LinearOperator for CsrMatrix {
    fn n(&self) -> usize {
        CsrMatrix::n(self)
    }

    fn apply(&self, x: &[f64], y: &mut [f64], exec: &Executor) -> Result<()> {
        exec.spmv(self, x, y)
    }
}

/// Data handed to the preconditioner at the end of a restart cycle.
#[derive(Debug)]
pub struct CycleInfo<'a> {
    /// Zero-based restart index.
    pub restart: usize,
    /// Square `k × k` Hessenberg matrix `V_kᵀ (A M⁻¹) V_k` (last row of `H̄_k` dropped).
    pub hessenberg: DMatrix<f64>,
    /// The `k` basis vectors of the cycle.
    pub basis: &'a [Vec<f64>],
}

/// Right preconditioner `M⁻¹`, fixed within a cycle.
pub trait Preconditioner {
    fn apply(&self, v: &[f64], out: &mut [f64], exec: &Executor) -> Result<()>;

    /// Called once per finished cycle, after the solution update.
    fn end_of_cycle(&mut self, _cycle: &CycleInfo<'_>, _a: &dyn LinearOperator, _exec: &Executor) -> Result<()> {
        Ok(())
    }
}

/// `M⁻¹ = I`.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityPreconditioner;

impl Preconditioner for IdentityPreconditioner {
    fn apply(&self, v: &[f64], out: &mut [f64], exec: &Executor) -> Result<()> {
        exec.copy(v, out);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GmresConfig {
    /// Inner iterations per cycle.
    pub m: usize,
    pub max_restarts: usize,
    /// Target for `‖b − A x‖₂ / ‖b − A x₀‖₂`.
    pub tol: f64,
    /// Run exactly `max_restarts` full cycles, ignoring `tol`.
    pub fixed_iterations: bool,
}

impl Default for GmresConfig {
    fn default() -> Self {
        Self { m: 50, max_restarts: 100, tol: 1e-8, fixed_iterations: false }
    }
}

impl GmresConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.max_restarts == 0 || !(self.tol > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "GMRES needs m >= 1, max_restarts >= 1 and tol > 0 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// Relative size of the new Arnoldi column norm, versus the cycle's initial
/// residual, below which the Krylov space is taken as invariant.
pub const BREAKDOWN_TOL: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InnerRecord {
    pub restart: usize,
    /// One-based inner step within the cycle.
    pub step: usize,
    /// `|γ_{k+1}|`, the residual norm of the step's iterate.
    pub monitored: f64,
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GmresReport {
    pub inner: Vec<InnerRecord>,
    /// Explicit `‖b − A x‖₂`: entry 0 before the first cycle, entry `j + 1`
    /// after cycle `j`.
    pub explicit: Vec<f64>,
    pub restarts_used: usize,
    pub converged: bool,
    pub final_relative_error: f64,
}

impl GmresReport {
    pub fn initial_residual(&self) -> f64 {
        self.explicit.first().copied().unwrap_or(0.0)
    }

    pub fn final_residual(&self) -> f64 {
        self.explicit.last().copied().unwrap_or(0.0)
    }

    /// CSV with columns `restart,inner_step,monitored_residual,explicit_residual`.
    ///
    /// Inner steps carry an empty explicit column; one extra row per cycle
    /// with `inner_step` 0 and an empty monitored column carries the explicit
    /// residual at the start of that cycle, and a final row with restart =
    /// `restarts_used` carries the last one.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["restart", "inner_step", "monitored_residual", "explicit_residual"])?;
        let mut inner = self.inner.iter().peekable();
        for (j, e) in self.explicit.iter().enumerate() {
            out.write_record([j.to_string(), "0".into(), String::new(), format!("{e:e}")])?;
            while let Some(rec) = inner.next_if(|r| r.restart == j) {
                out.write_record([j.to_string(), rec.step.to_string(), format!("{:e}", rec.monitored), String::new()])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Storage for one GMRES(m) cycle.
#[derive(Debug, Clone)]
pub struct GmresWorkspace {
    m: usize,
    /// Basis vectors `v_0 … v_m`.
    basis: Vec<Vec<f64>>,
    /// Columns of `H̄`, each of length `m + 1`, before rotation.
    hessenberg: Vec<Vec<f64>>,
    /// Columns of `H̄` after the Givens rotations (upper triangular part).
    triangular: Vec<Vec<f64>>,
    cos: Vec<f64>,
    sin: Vec<f64>,
    /// Rotated right-hand side `β e₁`.
    g: Vec<f64>,
    beta: f64,
    scratch: Vec<f64>,
}

/// Outcome of one Arnoldi step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArnoldiStep {
    /// `h_{k+1,k}`.
    pub subdiagonal: f64,
    /// The new vector lies (numerically) in the span of the previous ones.
    pub breakdown: bool,
}

impl GmresWorkspace {
    pub fn new(n: usize, m: usize) -> Self {
        Self {
            m,
            basis: (0..=m).map(|_| vec![0.0; n]).collect(),
            hessenberg: vec![vec![0.0; m + 1]; m],
            triangular: vec![vec![0.0; m + 1]; m],
            cos: vec![0.0; m],
            sin: vec![0.0; m],
            g: vec![0.0; m + 1],
            beta: 0.0,
            scratch: vec![0.0; n],
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Entry `(i, j)` of `H̄` before rotation.
    pub fn h(&self, i: usize, j: usize) -> f64 {
        self.hessenberg[j][i]
    }

    /// Starts a cycle from residual `r` (consumed into `v_0`).
    pub fn start(&mut self, r: &[f64], exec: &Executor) -> f64 {
        let beta = exec.norm2(r);
        self.beta = beta;
        self.g.iter_mut().for_each(|v| *v = 0.0);
        self.g[0] = beta;
        for col in self.hessenberg.iter_mut().chain(self.triangular.iter_mut()) {
            col.iter_mut().for_each(|v| *v = 0.0);
        }
        exec.copy(r, &mut self.basis[0]);
        if beta > 0.0 {
            exec.scale(1.0 / beta, &mut self.basis[0]);
        }
        beta
    }

    /// `w = A M⁻¹ v_k`, orthogonalized against `v_0 … v_k` by modified
    /// Gram–Schmidt; fills column `k` of `H̄` and, unless the step breaks
    /// down, stores `v_{k+1} = w / h_{k+1,k}`.
    pub fn arnoldi_step<A, P>(&mut self, a: &A, m_inv: &P, k: usize, exec: &Executor) -> Result<ArnoldiStep>
    where
        A: LinearOperator + ?Sized,
        P: Preconditioner + ?Sized,
    {
        assert!(k < self.m, "Arnoldi step {k} beyond restart length {}", self.m);
        let (head, tail) = self.basis.split_at_mut(k + 1);
        let w = &mut tail[0];
        m_inv.apply(&head[k], &mut self.scratch, exec)?;
        a.apply(&self.scratch, w, exec)?;
        let col = &mut self.hessenberg[k];
        for (i, v) in head.iter().enumerate() {
            let h = exec.dot(w, v)?;
            col[i] = h;
            exec.axpy(-h, v, w);
        }
        let h_next = exec.norm2(w);
        if !h_next.is_finite() || col[..=k].iter().any(|h| !h.is_finite()) {
            return Err(Error::NonFinite("Arnoldi step"));
        }
        let breakdown = h_next <= BREAKDOWN_TOL * self.beta;
        if breakdown {
            // invariant subspace: the step's iterate solves the system exactly
            col[k + 1] = 0.0;
        } else {
            col[k + 1] = h_next;
            exec.scale(1.0 / h_next, w);
        }
        Ok(ArnoldiStep { subdiagonal: h_next, breakdown })
    }

    /// Applies the previous rotations to column `k`, computes the rotation
    /// that annihilates `h_{k+1,k}`, updates `g`, and returns `|γ_{k+1}|`.
    pub fn apply_rotations_and_update(&mut self, k: usize) -> f64 {
        let col = &mut self.triangular[k];
        col.copy_from_slice(&self.hessenberg[k]);
        for i in 0..k {
            let (c, s) = (self.cos[i], self.sin[i]);
            let t = c * col[i] + s * col[i + 1];
            col[i + 1] = -s * col[i] + c * col[i + 1];
            col[i] = t;
        }
        let (a, b) = (col[k], col[k + 1]);
        let d = a.hypot(b);
        let (c, s) = if d == 0.0 { (1.0, 0.0) } else { (a / d, b / d) };
        self.cos[k] = c;
        self.sin[k] = s;
        col[k] = d;
        col[k + 1] = 0.0;
        self.g[k + 1] = -s * self.g[k];
        self.g[k] *= c;
        self.g[k + 1].abs()
    }

    /// `y = argmin ‖β e₁ − H̄_k y‖₂` by back substitution on the rotated factor.
    pub fn solve_least_squares(&self, k: usize) -> Result<Vec<f64>> {
        let mut y = self.g[..k].to_vec();
        for i in (0..k).rev() {
            let mut s = y[i];
            for j in i + 1..k {
                s -= self.triangular[j][i] * y[j];
            }
            let d = self.triangular[i][i];
            if d == 0.0 || !d.is_finite() {
                return Err(Error::SingularProjection(i));
            }
            y[i] = s / d;
        }
        Ok(y)
    }

    /// `M⁻¹ V_k y`, the correction to the cycle's starting iterate.
    pub fn correction<P: Preconditioner + ?Sized>(&mut self, y: &[f64], m_inv: &P, exec: &Executor) -> Result<Vec<f64>> {
        let n = self.scratch.len();
        let mut t = vec![0.0; n];
        for (v, &yi) in self.basis.iter().zip(y) {
            exec.axpy(yi, v, &mut t);
        }
        let mut z = vec![0.0; n];
        m_inv.apply(&t, &mut z, exec)?;
        Ok(z)
    }

    /// Square `k × k` Hessenberg matrix of the current cycle.
    pub fn square_hessenberg(&self, k: usize) -> DMatrix<f64> {
        DMatrix::from_fn(k, k, |i, j| self.hessenberg[j][i])
    }

    /// `(k + 1) × k` matrix `H̄_k`.
    pub fn hessenberg_bar(&self, k: usize) -> DMatrix<f64> {
        DMatrix::from_fn(k + 1, k, |i, j| self.hessenberg[j][i])
    }
}

/// `r = b − A x`; returns `‖r‖₂`.
pub fn residual<A: LinearOperator + ?Sized>(a: &A, b: &[f64], x: &[f64], r: &mut [f64], exec: &Executor) -> Result<f64> {
    a.apply(x, r, exec)?;
    exec.axpby(1.0, b, -1.0, r);
    Ok(exec.norm2(r))
}

/// Solves `A x = b` by right-preconditioned GMRES(m) starting from `x0`.
///
/// Returns the final iterate together with its report. Failing to reach
/// `tol` is not an error here; check [`GmresReport::converged`].
pub fn gmres_restarted<A, P>(
    a: &A,
    m_inv: &mut P,
    b: &[f64],
    x0: &[f64],
    cfg: &GmresConfig,
    exec: &Executor,
) -> Result<(Vec<f64>, GmresReport)>
where
    A: LinearOperator,
    P: Preconditioner + ?Sized,
{
    cfg.validate()?;
    let n = a.n();
    check_len(n, b.len())?;
    check_len(n, x0.len())?;
    if b.iter().chain(x0).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("GMRES input"));
    }
    let mut ws = GmresWorkspace::new(n, cfg.m);
    let mut x = x0.to_vec();
    let mut r = vec![0.0; n];
    let mut report = GmresReport::default();

    let r0 = residual(a, b, &x, &mut r, exec)?;
    report.explicit.push(r0);
    if r0 == 0.0 {
        report.converged = true;
        return Ok((x, report));
    }
    let mut rel = 1.0;
    for restart in 0..cfg.max_restarts {
        let beta = ws.start(&r, exec);
        if beta == 0.0 {
            break;
        }
        let mut k_used = 0;
        for k in 0..cfg.m {
            let step = ws.arnoldi_step(a, m_inv, k, exec)?;
            let t = Instant::now();
            let monitored = ws.apply_rotations_and_update(k);
            exec.record_serial(t.elapsed().as_secs_f64());
            if !monitored.is_finite() {
                return Err(Error::NonFinite("Givens update"));
            }
            report.inner.push(InnerRecord { restart, step: k + 1, monitored });
            k_used = k + 1;
            if step.breakdown || (!cfg.fixed_iterations && monitored <= cfg.tol * r0) {
                break;
            }
        }
        let t = Instant::now();
        let y = ws.solve_least_squares(k_used)?;
        exec.record_serial(t.elapsed().as_secs_f64());
        let dx = ws.correction(&y, &*m_inv, exec)?;
        exec.axpy(1.0, &dx, &mut x);

        let cycle = CycleInfo { restart, hessenberg: ws.square_hessenberg(k_used), basis: &ws.basis[..k_used] };
        m_inv.end_of_cycle(&cycle, a, exec)?;

        let rn = residual(a, b, &x, &mut r, exec)?;
        if !rn.is_finite() {
            return Err(Error::NonFinite("GMRES residual"));
        }
        report.explicit.push(rn);
        report.restarts_used = restart + 1;
        rel = rn / r0;
        if !cfg.fixed_iterations && rel <= cfg.tol {
            break;
        }
    }
    report.final_relative_error = rel;
    report.converged = rel <= cfg.tol;
    Ok((x, report))
}
