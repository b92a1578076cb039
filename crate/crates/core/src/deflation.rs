//! Deflation preconditioner built from restart-time Ritz information.
//!
//! With an orthonormal basis `U` (N × r) of approximate eigenvectors for the
//! smallest-magnitude eigenvalues of `A`, `T = Uᵀ A U` and `μ` the largest
//! eigenvalue seen so far,
//!
//! ```text
//! M⁻¹ = I + U (|μ| T⁻¹ − I) Uᵀ
//! ```
//!
//! When `U` spans an invariant subspace, `A M⁻¹` maps it onto itself with all
//! eigenvalues moved to `|μ|` and leaves the rest of the spectrum alone.
//!
//! After every GMRES cycle one new direction is taken from the square
//! Hessenberg matrix `H` of the cycle: the eigenvector `z` of its
//! smallest-magnitude eigenvalue (inverse power iteration) lifted to `V z`,
//! orthonormalized against `U` and appended. Once `r` exceeds `r_max`, the
//! direction belonging to the largest-magnitude eigenvalue of `T` is
//! dropped.

use std::io::Write;

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::krylov::{CycleInfo, LinearOperator, Preconditioner};
use crate::parallel::Executor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DeflationConfig {
    pub r_max: usize,
    /// Vectors added per restart.
    pub per_restart: usize,
    /// Minimum norm of a candidate after orthogonalization against `U`.
    pub accept_tol: f64,
    pub inverse_power_tol: f64,
    pub inverse_power_max_iter: usize,
    pub power_max_iter: usize,
}

impl Default for DeflationConfig {
    fn default() -> Self {
        Self {
            r_max: 20,
            per_restart: 1,
            accept_tol: 1e-8,
            inverse_power_tol: 1e-10,
            inverse_power_max_iter: 500,
            power_max_iter: 200,
        }
    }
}

/// One line of the per-restart diagnostic dump.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DeflationRecord {
    pub restart: usize,
    pub r: usize,
    pub mu: f64,
    /// Smallest-magnitude Ritz value of the cycle, `NaN` when inverse
    /// iteration did not converge.
    pub smallest_ritz: f64,
}

#[derive(Debug, Clone)]
pub struct Deflator {
    cfg: DeflationConfig,
    u: Vec<Vec<f64>>,
    au: Vec<Vec<f64>>,
    t: DMatrix<f64>,
    t_lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    mu: f64,
    records: Vec<DeflationRecord>,
}

impl Default for Deflator {
    fn default() -> Self {
        Self::new(DeflationConfig::default())
    }
}

impl Deflator {
    pub fn new(cfg: DeflationConfig) -> Self {
        Self { cfg, u: Vec::new(), au: Vec::new(), t: DMatrix::zeros(0, 0), t_lu: None, mu: 0.0, records: Vec::new() }
    }

    /// Builds a deflator from given orthonormal vectors, their images under
    /// `A`, and the shift `mu`.
    pub fn from_basis(cfg: DeflationConfig, u: Vec<Vec<f64>>, au: Vec<Vec<f64>>, mu: f64) -> Self {
        let mut d = Self::new(cfg);
        d.u = u;
        d.au = au;
        d.mu = mu;
        d.rebuild_t();
        d
    }

    pub fn rank(&self) -> usize {
        self.u.len()
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.u
    }

    pub fn images(&self) -> &[Vec<f64>] {
        &self.au
    }

    /// `T = Uᵀ A U`.
    pub fn t(&self) -> &DMatrix<f64> {
        &self.t
    }

    pub fn config(&self) -> &DeflationConfig {
        &self.cfg
    }

    pub fn records(&self) -> &[DeflationRecord] {
        &self.records
    }

    /// Drops the basis; `μ` and the diagnostic records are kept.
    pub fn reset(&mut self) {
        self.u.clear();
        self.au.clear();
        self.t = DMatrix::zeros(0, 0);
        self.t_lu = None;
    }

    fn rebuild_t(&mut self) {
        let r = self.u.len();
        self.t = DMatrix::from_fn(r, r, |i, j| crate::sparse::dot_unchecked(&self.u[i], &self.au[j]));
        self.refactor();
    }

    fn refactor(&mut self) {
        self.t_lu = if self.t.nrows() == 0 { None } else { Some(self.t.clone().lu()) };
    }

    /// `‖UᵀU − I‖_max`.
    pub fn orthonormality_error(&self) -> f64 {
        let r = self.u.len();
        let mut worst = 0.0f64;
        for i in 0..r {
            for j in 0..r {
                let d = crate::sparse::dot_unchecked(&self.u[i], &self.u[j]);
                worst = worst.max((d - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        worst
    }

    /// `‖T − Uᵀ(A U)‖_max` with `A U` recomputed from `a`.
    pub fn consistency_error(&self, a: &dyn LinearOperator, exec: &Executor) -> Result<f64> {
        let mut worst = 0.0f64;
        let mut au = vec![0.0; a.n()];
        for j in 0..self.u.len() {
            a.apply(&self.u[j], &mut au, exec)?;
            for i in 0..self.u.len() {
                let d = crate::sparse::dot_unchecked(&self.u[i], &au);
                worst = worst.max((self.t[(i, j)] - d).abs());
            }
        }
        Ok(worst)
    }

    /// `w = v + U (|μ| T⁻¹ Uᵀ v − Uᵀ v)`.
    pub fn apply_to(&self, v: &[f64], w: &mut [f64], exec: &Executor) -> Result<()> {
        exec.copy(v, w);
        let Some(lu) = &self.t_lu else { return Ok(()) };
        let c = DVector::from_iterator(self.u.len(), self.u.iter().map(|u| exec.norm_dot(u, v)));
        let Some(tc) = lu.solve(&c) else {
            warn!("deflation: T is singular, preconditioner bypassed");
            return Ok(());
        };
        let s = tc * self.mu.abs() - c;
        if s.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("deflation apply"));
        }
        for (u, &si) in self.u.iter().zip(s.iter()) {
            exec.axpy(si, u, w);
        }
        Ok(())
    }

    /// Extracts a new direction from a finished cycle, updates `μ`, and
    /// truncates if the basis grew past `r_max`.
    pub fn update_from_restart(
        &mut self,
        restart: usize,
        h: &DMatrix<f64>,
        basis: &[Vec<f64>],
        a: &dyn LinearOperator,
        exec: &Executor,
    ) -> Result<()> {
        let k = h.nrows();
        if k == 0 {
            return Ok(());
        }
        let smallest = inverse_power(h, self.cfg.inverse_power_tol, self.cfg.inverse_power_max_iter);
        let Some((theta, z)) = smallest else {
            warn!("deflation: inverse iteration did not converge at restart {restart}; update skipped");
            self.records.push(DeflationRecord { restart, r: self.rank(), mu: self.mu, smallest_ritz: f64::NAN });
            return Ok(());
        };
        let largest = power_iteration(h, self.cfg.power_max_iter);
        self.mu = self.mu.max(largest.abs());

        let n = a.n();
        let mut cand = vec![0.0; n];
        for (v, &zi) in basis.iter().zip(z.iter()) {
            exec.axpy(zi, v, &mut cand);
        }
        // modified Gram–Schmidt against U, twice
        for _ in 0..2 {
            for u in &self.u {
                let c = exec.norm_dot(u, &cand);
                exec.axpy(-c, u, &mut cand);
            }
        }
        let norm = exec.norm2(&cand);
        if norm >= self.cfg.accept_tol {
            exec.scale(1.0 / norm, &mut cand);
            let mut acand = vec![0.0; n];
            a.apply(&cand, &mut acand, exec)?;
            self.push(cand, acand, exec);
            if self.rank() > self.cfg.r_max {
                self.truncate();
            }
        }
        self.records.push(DeflationRecord { restart, r: self.rank(), mu: self.mu, smallest_ritz: theta });
        Ok(())
    }

    fn push(&mut self, u: Vec<f64>, au: Vec<f64>, exec: &Executor) {
        let r = self.u.len();
        let mut t = DMatrix::zeros(r + 1, r + 1);
        t.view_mut((0, 0), (r, r)).copy_from(&self.t);
        for j in 0..r {
            t[(r, j)] = exec.norm_dot(&u, &self.au[j]);
            t[(j, r)] = exec.norm_dot(&self.u[j], &au);
        }
        t[(r, r)] = exec.norm_dot(&u, &au);
        self.u.push(u);
        self.au.push(au);
        self.t = t;
        self.refactor();
    }

    /// Removes directions until `r ≤ r_max`, each time dropping the one that
    /// belongs to the largest-magnitude real eigenvalue of `T`.
    ///
    /// The retained subspace is the complement of the left eigenvector `y` of
    /// that eigenvalue: `T` maps `y^⊥` into itself, so the remaining
    /// eigenvalues of `T` are unchanged.
    pub fn truncate(&mut self) {
        while self.rank() > self.cfg.r_max {
            let r = self.rank();
            let Some(q) = complement_of_top_left_eigenvector(&self.t) else {
                warn!("deflation: no real eigenvalue of T to drop; truncation skipped");
                return;
            };
            let rotate = |vs: &[Vec<f64>]| -> Vec<Vec<f64>> {
                (0..r - 1)
                    .map(|c| {
                        let mut out = vec![0.0; vs[0].len()];
                        for (v, &w) in vs.iter().zip(q.column(c).iter()) {
                            crate::sparse::axpy_in_place(w, v, &mut out);
                        }
                        out
                    })
                    .collect()
            };
            self.u = rotate(&self.u);
            self.au = rotate(&self.au);
            self.t = q.transpose() * &self.t * &q;
            self.refactor();
        }
    }

    /// CSV with columns `restart,r,mu,smallest_ritz`.
    pub fn write_records_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["restart", "r", "mu", "smallest_ritz"])?;
        for rec in &self.records {
            out.write_record([
                rec.restart.to_string(),
                rec.r.to_string(),
                format!("{:e}", rec.mu),
                format!("{:e}", rec.smallest_ritz),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

impl Preconditioner for Deflator {
    fn apply(&self, v: &[f64], out: &mut [f64], exec: &Executor) -> Result<()> {
        self.apply_to(v, out, exec)
    }

    fn end_of_cycle(&mut self, cycle: &CycleInfo<'_>, a: &dyn LinearOperator, exec: &Executor) -> Result<()> {
        self.update_from_restart(cycle.restart, &cycle.hessenberg, cycle.basis, a, exec)
    }
}

impl Executor {
    /// Inner product through the worker layer; falls back to the sequential
    /// kernel for short vectors.
    pub(crate) fn norm_dot(&self, a: &[f64], b: &[f64]) -> f64 {
        self.dot_unchecked(a, b)
    }
}

/// Largest component positive, unit 2-norm.
fn normalize_sign(v: &mut DVector<f64>) {
    let norm = v.norm();
    if norm > 0.0 {
        *v /= norm;
    }
    let (imax, _) = v.iter().enumerate().fold((0, 0.0), |(bi, bv), (i, &x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) });
    if v[imax] < 0.0 {
        v.neg_mut();
    }
}

/// Eigenpair of the smallest-magnitude eigenvalue of `h` by inverse
/// iteration with zero shift.
///
/// Converged when `‖h z − θ z‖₂ ≤ tol ‖h‖_F`; returns `None` when `h` is
/// singular to working precision or `max_iter` is exhausted.
pub fn inverse_power(h: &DMatrix<f64>, tol: f64, max_iter: usize) -> Option<(f64, DVector<f64>)> {
    let k = h.nrows();
    let lu = h.clone().lu();
    let scale = h.norm();
    if scale == 0.0 {
        return None;
    }
    let mut z = DVector::from_element(k, 1.0 / (k as f64).sqrt());
    for _ in 0..max_iter {
        let mut next = lu.solve(&z)?;
        if next.iter().any(|x| !x.is_finite()) {
            return None;
        }
        normalize_sign(&mut next);
        z = next;
        let hz = h * &z;
        let theta = z.dot(&hz);
        if (&hz - &z * theta).norm() <= tol * scale {
            return Some((theta, z));
        }
    }
    None
}

/// Largest-magnitude eigenvalue estimate of `h` by power iteration
/// (Rayleigh quotient after at most `max_iter` steps).
pub fn power_iteration(h: &DMatrix<f64>, max_iter: usize) -> f64 {
    let k = h.nrows();
    if k == 0 {
        return 0.0;
    }
    let mut z = DVector::from_element(k, 1.0 / (k as f64).sqrt());
    let mut theta = 0.0;
    for _ in 0..max_iter {
        let hz = h * &z;
        let prev = theta;
        theta = z.dot(&hz);
        let norm = hz.norm();
        if norm == 0.0 {
            return 0.0;
        }
        z = hz / norm;
        if (theta - prev).abs() <= 1e-12 * theta.abs() {
            break;
        }
    }
    theta
}

/// Orthonormal basis (r × (r−1)) of the orthogonal complement of the left
/// eigenvector belonging to the largest-magnitude real eigenvalue of `t`.
///
/// Unit vectors `e_j` (all but the one most aligned with `y`) are projected
/// against `y` and orthonormalized in order, so directions unrelated to `y`
/// keep their position.
fn complement_of_top_left_eigenvector(t: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let r = t.nrows();
    let theta = t
        .complex_eigenvalues()
        .iter()
        .filter(|l| l.im.abs() <= 1e-12 * l.norm().max(f64::MIN_POSITIVE))
        .map(|l| l.re)
        .fold(None, |best: Option<f64>, l| match best {
            Some(b) if b.abs() >= l.abs() => Some(b),
            _ => Some(l),
        })?;
    let shifted = t.transpose() - DMatrix::identity(r, r) * theta;
    let svd = shifted.svd(false, true);
    let v_t = svd.v_t?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &s)| if s < bv { (i, s) } else { (bi, bv) });
    let y: DVector<f64> = v_t.row(imin).transpose();
    let drop = y.iamax();
    let mut cols: Vec<DVector<f64>> = vec![y.clone()];
    for j in (0..r).filter(|&j| j != drop) {
        let mut e = DVector::zeros(r);
        e[j] = 1.0;
        for _ in 0..2 {
            for c in &cols {
                let d = c.dot(&e);
                e -= c * d;
            }
        }
        let n = e.norm();
        e /= n;
        cols.push(e);
    }
    Some(DMatrix::from_columns(&cols[1..]))
}
