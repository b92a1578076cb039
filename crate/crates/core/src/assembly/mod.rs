//! Galerkin assembly of the Bratu residual and Jacobian.
//!
//! For a node `i` that is not on an x- or y-face,
//!
//! ```text
//! R_i  = -Σ_j u_j ∫ ∇φ_j·∇φ_i dV + λ ∫ exp(u_h) φ_i dV
//! J_ij = -∫ ∇φ_j·∇φ_i dV + λ ∫ exp(u_h) φ_j φ_i dV
//! ```
//!
//! Rows of x/y-face nodes are replaced by the constraint `u_i = 0`:
//! `R_i = u_i` and a unit diagonal in `J`. Columns that reference
//! constrained nodes from unconstrained rows are kept.
//!
//! All elements are congruent axis-aligned cubes, so the stiffness matrix is
//! computed once and reused; only the `exp(u_h)` term varies per element.

mod basis;

pub use basis::{shape_eval, BasisEval, QuadratureRule};

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{check_len, Error, Result};
use crate::mesh::{StructuredMesh, NODES_PER_ELEMENT};
use crate::parallel::{coupled_lines, Executor, ReductionMode};
use crate::sparse::{CsrMatrix, SparsityPattern};

const NE: usize = NODES_PER_ELEMENT;

/// Quadrature data shared by every element of a mesh.
#[derive(Debug, Clone)]
pub struct ElementTables {
    /// `phi[q][a]`: basis function `a` at quadrature point `q`.
    phi: Vec<[f64; NE]>,
    /// Quadrature weight times the (constant) Jacobian determinant.
    weight_det: Vec<f64>,
    /// Element stiffness `∫ ∇φ_a·∇φ_b dV`, row-major.
    stiffness: Vec<f64>,
}

impl ElementTables {
    pub fn new(element_size: f64) -> Self {
        let rule = QuadratureRule::gauss_3x3x3();
        let half = 0.5 * element_size;
        let det = half * half * half;
        let grad_scale = 1.0 / half;
        let mut phi = Vec::with_capacity(rule.len());
        let mut weight_det = Vec::with_capacity(rule.len());
        let mut stiffness = vec![0.0; NE * NE];
        for (p, &w) in rule.points.iter().zip(&rule.weights) {
            let b = shape_eval(p[0], p[1], p[2]);
            let wd = w * det;
            for a in 0..NE {
                for c in 0..NE {
                    let g: f64 = (0..3).map(|d| b.gradients[a][d] * b.gradients[c][d]).sum();
                    stiffness[a * NE + c] += wd * g * grad_scale * grad_scale;
                }
            }
            phi.push(b.values);
            weight_det.push(wd);
        }
        Self { phi, weight_det, stiffness }
    }

    pub fn stiffness(&self, a: usize, b: usize) -> f64 {
        self.stiffness[a * NE + b]
    }

    /// `λ w_q det exp(u_h(x_q))` at each quadrature point.
    fn source_weights(&self, ue: &[f64; NE], lambda: f64) -> [f64; NE] {
        let mut out = [0.0; NE];
        for (q, o) in out.iter_mut().enumerate() {
            let uq: f64 = self.phi[q].iter().zip(ue).map(|(p, u)| p * u).sum();
            *o = lambda * self.weight_det[q] * uq.exp();
        }
        out
    }

    fn local_residual(&self, ue: &[f64; NE], lambda: f64) -> [f64; NE] {
        let s = self.source_weights(ue, lambda);
        let mut r = [0.0; NE];
        for (a, ra) in r.iter_mut().enumerate() {
            let k = &self.stiffness[a * NE..(a + 1) * NE];
            let diffusion: f64 = k.iter().zip(ue).map(|(k, u)| k * u).sum();
            let source: f64 = (0..NE).map(|q| s[q] * self.phi[q][a]).sum();
            *ra = source - diffusion;
        }
        r
    }

    fn local_jacobian(&self, ue: &[f64; NE], lambda: f64) -> Vec<f64> {
        let s = self.source_weights(ue, lambda);
        let mut j: Vec<f64> = self.stiffness.iter().map(|k| -k).collect();
        for q in 0..NE {
            let phi = &self.phi[q];
            for a in 0..NE {
                let sa = s[q] * phi[a];
                let row = &mut j[a * NE..(a + 1) * NE];
                for (jab, pb) in row.iter_mut().zip(phi) {
                    *jab += sa * pb;
                }
            }
        }
        j
    }
}

fn gather(ids: &[usize; NE], u: &[f64]) -> [f64; NE] {
    std::array::from_fn(|a| u[ids[a]])
}

/// Sparsity of the Jacobian. It does not depend on `u`.
///
/// Unconstrained row `i` holds every node that shares an element with node
/// `i`; constrained rows hold only the diagonal.
pub fn symbolic_pattern(mesh: &StructuredMesh) -> SparsityPattern {
    let n = mesh.n_nodes();
    let lines: Vec<Range<usize>> = (0..mesh.n_axis()).map(|i| coupled_lines(mesh, i)).collect();
    let mut row_ptr = Vec::with_capacity(n + 1);
    row_ptr.push(0);
    let nnz: usize = (0..n)
        .map(|id| {
            if mesh.is_dirichlet(id) {
                1
            } else {
                let (i, j, k) = mesh.node_index(id);
                lines[i].len() * lines[j].len() * lines[k].len()
            }
        })
        .sum();
    let mut col_idx = Vec::with_capacity(nnz);
    for id in 0..n {
        if mesh.is_dirichlet(id) {
            col_idx.push(id as u32);
        } else {
            let (i, j, k) = mesh.node_index(id);
            for kk in lines[k].clone() {
                for jj in lines[j].clone() {
                    for ii in lines[i].clone() {
                        col_idx.push(mesh.node_id(ii, jj, kk) as u32);
                    }
                }
            }
        }
        row_ptr.push(col_idx.len());
    }
    SparsityPattern { n, row_ptr, col_idx }
}

/// Reusable assembler: caches the element tables and the sparsity pattern.
#[derive(Debug, Clone)]
pub struct Assembler<'m> {
    mesh: &'m StructuredMesh,
    tables: ElementTables,
    pattern: SparsityPattern,
}

impl<'m> Assembler<'m> {
    pub fn new(mesh: &'m StructuredMesh) -> Self {
        Self { mesh, tables: ElementTables::new(mesh.element_size()), pattern: symbolic_pattern(mesh) }
    }

    pub fn mesh(&self) -> &StructuredMesh {
        self.mesh
    }

    pub fn pattern(&self) -> &SparsityPattern {
        &self.pattern
    }

    pub fn tables(&self) -> &ElementTables {
        &self.tables
    }

    /// Worker row blocks as node-plane ranges.
    fn plane_blocks(&self, exec: &Executor) -> Result<()> {
        let plane = self.mesh.plane_size();
        check_len(self.mesh.n_nodes(), exec.partition().n())?;
        if exec.partition().row_ranges().iter().any(|r| r.start % plane != 0 || r.end % plane != 0) {
            return Err(Error::InvalidConfig("assembly needs a plane-aligned partition".into()));
        }
        Ok(())
    }

    pub fn residual(&self, u: &[f64], lambda: f64, exec: &Executor) -> Result<Vec<f64>> {
        let mesh = self.mesh;
        check_len(mesh.n_nodes(), u.len())?;
        self.plane_blocks(exec)?;
        let plane = mesh.plane_size();
        let mut r = vec![0.0; mesh.n_nodes()];
        exec.for_each_block(&mut r, |i| i, |_, rows, out| {
            let start = rows.start;
            for e in mesh.elements_touching_planes(rows.start / plane, rows.end / plane) {
                let ids = mesh.element_nodes_unchecked(e);
                let local = self.tables.local_residual(&gather(&ids, u), lambda);
                for (a, &i) in ids.iter().enumerate() {
                    if rows.contains(&i) && !mesh.is_dirichlet(i) {
                        out[i - start] += local[a];
                    }
                }
            }
            for i in rows {
                if mesh.is_dirichlet(i) {
                    out[i - start] = u[i];
                }
            }
        });
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("residual assembly"));
        }
        Ok(r)
    }

    pub fn jacobian(&self, u: &[f64], lambda: f64, exec: &Executor) -> Result<CsrMatrix> {
        check_len(self.mesh.n_nodes(), u.len())?;
        self.plane_blocks(exec)?;
        let mut a = CsrMatrix::from_pattern(self.pattern.clone());
        match exec.mode() {
            ReductionMode::Deterministic => self.jacobian_by_rows(u, lambda, exec, &mut a),
            ReductionMode::FreeOrder => self.jacobian_atomic(u, lambda, exec, &mut a),
        }
        if a.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Jacobian assembly"));
        }
        Ok(a)
    }

    /// Each worker sweeps the elements touching its slab in ascending order
    /// and accumulates only into its own rows, so every entry sees the same
    /// summation order for any worker count.
    fn jacobian_by_rows(&self, u: &[f64], lambda: f64, exec: &Executor, a: &mut CsrMatrix) {
        let mesh = self.mesh;
        let plane = mesh.plane_size();
        let row_ptr = &self.pattern.row_ptr;
        let cols = &self.pattern.col_idx;
        exec.for_each_block(a.values_mut(), |i| row_ptr[i], |_, rows, out| {
            let base = row_ptr[rows.start];
            for e in mesh.elements_touching_planes(rows.start / plane, rows.end / plane) {
                let ids = mesh.element_nodes_unchecked(e);
                let local = self.tables.local_jacobian(&gather(&ids, u), lambda);
                for (la, &i) in ids.iter().enumerate() {
                    if !rows.contains(&i) || mesh.is_dirichlet(i) {
                        continue;
                    }
                    scatter_row(&cols[row_ptr[i]..row_ptr[i + 1]], &ids, &local[la * NE..(la + 1) * NE], |p, v| {
                        out[row_ptr[i] + p - base] += v
                    });
                }
            }
            for i in rows {
                if mesh.is_dirichlet(i) {
                    out[row_ptr[i] - base] = 1.0;
                }
            }
        });
    }

    /// Elements are dealt out evenly and entries accumulated with atomic
    /// adds; summation order, and hence the last bits, vary run to run.
    fn jacobian_atomic(&self, u: &[f64], lambda: f64, exec: &Executor, a: &mut CsrMatrix) {
        let mesh = self.mesh;
        let row_ptr = &self.pattern.row_ptr;
        let cols = &self.pattern.col_idx;
        let acc: Vec<AtomicU64> = (0..a.nnz()).map(|_| AtomicU64::new(0f64.to_bits())).collect();
        let n_el = mesh.n_elements();
        let p = exec.workers();
        exec.for_each_worker(|w| {
            for e in (w * n_el / p)..((w + 1) * n_el / p) {
                let ids = mesh.element_nodes_unchecked(e);
                let local = self.tables.local_jacobian(&gather(&ids, u), lambda);
                for (la, &i) in ids.iter().enumerate() {
                    if mesh.is_dirichlet(i) {
                        continue;
                    }
                    scatter_row(&cols[row_ptr[i]..row_ptr[i + 1]], &ids, &local[la * NE..(la + 1) * NE], |p, v| {
                        atomic_add(&acc[row_ptr[i] + p], v)
                    });
                }
            }
        });
        for (dst, src) in a.values_mut().iter_mut().zip(&acc) {
            *dst = f64::from_bits(src.load(Ordering::Relaxed));
        }
        for i in (0..mesh.n_nodes()).filter(|&i| mesh.is_dirichlet(i)) {
            a.values_mut()[row_ptr[i]] = 1.0;
        }
    }
}

/// Adds `vals[b]` at column `ids[b]` of a sorted row. Element ids ascend in
/// local order, so a single forward merge finds every position.
#[inline]
fn scatter_row(row_cols: &[u32], ids: &[usize; NE], vals: &[f64], mut add: impl FnMut(usize, f64)) {
    let mut p = row_cols.partition_point(|&c| (c as usize) < ids[0]);
    for (&id, &v) in ids.iter().zip(vals) {
        while row_cols[p] as usize != id {
            p += 1;
        }
        add(p, v);
    }
}

fn atomic_add(slot: &AtomicU64, v: f64) {
    let mut cur = slot.load(Ordering::Relaxed);
    loop {
        let next = (f64::from_bits(cur) + v).to_bits();
        match slot.compare_exchange_weak(cur, next, Ordering::Relaxed, Ordering::Relaxed) {
            Ok(_) => return,
            Err(actual) => cur = actual,
        }
    }
}

pub fn assemble_residual(mesh: &StructuredMesh, u: &[f64], lambda: f64) -> Result<Vec<f64>> {
    Assembler::new(mesh).residual(u, lambda, &Executor::sequential(mesh.n_nodes()))
}

pub fn assemble_jacobian(mesh: &StructuredMesh, u: &[f64], lambda: f64) -> Result<CsrMatrix> {
    Assembler::new(mesh).jacobian(u, lambda, &Executor::sequential(mesh.n_nodes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{dot, spmv_alloc};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_u(mesh: &StructuredMesh, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..mesh.n_nodes()).map(|_| rng.gen_range(-0.5..1.0)).collect()
    }

    #[test]
    fn zero_state_zero_lambda_gives_zero_residual() {
        let mesh = StructuredMesh::new(2).unwrap();
        let r = assemble_residual(&mesh, &vec![0.0; mesh.n_nodes()], 0.0).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_source_residual() {
        for n_e in [1, 2, 3] {
            let mesh = StructuredMesh::new(n_e).unwrap();
            let r = assemble_residual(&mesh, &vec![0.0; mesh.n_nodes()], 6.8).unwrap();
            // Oracle: ∫φ_i over the whole cube by an independent 5-point
            // Gauss rule applied per element.
            let (g, w) = gauss5();
            let half = 0.5 * mesh.element_size();
            let mut integral = vec![0.0; mesh.n_nodes()];
            for e in 0..mesh.n_elements() {
                let ids = mesh.element_nodes(e).unwrap();
                for (i, wi) in g.iter().zip(&w) {
                    for (j, wj) in g.iter().zip(&w) {
                        for (k, wk) in g.iter().zip(&w) {
                            let b = shape_eval(*i, *j, *k);
                            for a in 0..27 {
                                integral[ids[a]] += wi * wj * wk * half.powi(3) * b.values[a];
                            }
                        }
                    }
                }
            }
            let mut interior_sum = 0.0;
            for id in 0..mesh.n_nodes() {
                if mesh.is_dirichlet(id) {
                    assert_eq!(r[id], 0.0);
                } else {
                    assert!(r[id] > 0.0);
                    assert!((r[id] - 6.8 * integral[id]).abs() < 1e-13);
                    interior_sum += r[id];
                }
            }
            // Σ over free nodes of ∫φ_i = volume minus what the face nodes carry
            let face: f64 = (0..mesh.n_nodes()).filter(|&i| mesh.is_dirichlet(i)).map(|i| integral[i]).sum();
            assert!((interior_sum - 6.8 * (1.0 - face)).abs() < 1e-12);
        }
    }

    fn gauss5() -> ([f64; 5], [f64; 5]) {
        let a = (5.0f64 - 2.0 * (10.0f64 / 7.0).sqrt()).sqrt() / 3.0;
        let b = (5.0f64 + 2.0 * (10.0f64 / 7.0).sqrt()).sqrt() / 3.0;
        let wa = (322.0 + 13.0 * 70.0f64.sqrt()) / 900.0;
        let wb = (322.0 - 13.0 * 70.0f64.sqrt()) / 900.0;
        ([-b, -a, 0.0, a, b], [wb, wa, 128.0 / 225.0, wa, wb])
    }

    #[test]
    fn constraint_rows_echo_u() {
        let mesh = StructuredMesh::new(2).unwrap();
        let mut u = vec![0.0; mesh.n_nodes()];
        let face = mesh.node_id(0, 2, 2);
        u[face] = 1.0;
        let r = assemble_residual(&mesh, &u, 6.8).unwrap();
        assert_eq!(r[face], 1.0);
        let j = assemble_jacobian(&mesh, &u, 6.8).unwrap();
        assert_eq!(j.row(face).0, &[face as u32]);
        assert_eq!(j.row(face).1, &[1.0]);
    }

    #[test]
    fn length_mismatch() {
        let mesh = StructuredMesh::new(1).unwrap();
        assert!(assemble_residual(&mesh, &[0.0; 5], 1.0).is_err());
        assert!(assemble_jacobian(&mesh, &[0.0; 5], 1.0).is_err());
    }

    #[test]
    fn laplacian_part_symmetric_and_annihilates_constants() {
        let mesh = StructuredMesh::new(3).unwrap();
        let j = assemble_jacobian(&mesh, &vec![0.0; mesh.n_nodes()], 0.0).unwrap();
        let n = mesh.n_axis();
        for i in 0..mesh.n_nodes() {
            if mesh.is_dirichlet(i) {
                continue;
            }
            let (cols, vals) = j.row(i);
            let stencil_free = cols.iter().all(|&c| !mesh.is_dirichlet(c as usize));
            for (&c, &v) in cols.iter().zip(vals) {
                if !mesh.is_dirichlet(c as usize) {
                    assert!((v - j.get(c as usize, i)).abs() < 1e-12);
                }
            }
            let (x, y, _) = mesh.node_index(i);
            if stencil_free {
                assert!(x >= 1 && y >= 1 && x < n - 1 && y < n - 1);
                assert!(vals.iter().sum::<f64>().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stiffness_is_negative_semidefinite_on_free_nodes() {
        let mesh = StructuredMesh::new(3).unwrap();
        let j = assemble_jacobian(&mesh, &vec![0.0; mesh.n_nodes()], 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let v: Vec<f64> = (0..mesh.n_nodes())
                .map(|i| if mesh.is_dirichlet(i) { 0.0 } else { rng.gen_range(-1.0..1.0) })
                .collect();
            assert!(dot(&v, &spmv_alloc(&j, &v).unwrap()).unwrap() <= 0.0);
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        for n_e in [1, 2] {
            let mesh = StructuredMesh::new(n_e).unwrap();
            let u = random_u(&mesh, n_e as u64);
            let jac = assemble_jacobian(&mesh, &u, 6.8).unwrap().to_dense();
            let eps = 1e-6;
            for j in 0..mesh.n_nodes() {
                let mut up = u.clone();
                let mut um = u.clone();
                up[j] += eps;
                um[j] -= eps;
                let rp = assemble_residual(&mesh, &up, 6.8).unwrap();
                let rm = assemble_residual(&mesh, &um, 6.8).unwrap();
                let fd: Vec<f64> = rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
                let col: Vec<f64> = jac.iter().map(|row| row[j]).collect();
                let diff = fd.iter().zip(&col).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let scale = col.iter().map(|a| a * a).sum::<f64>().sqrt();
                assert!(diff <= 1e-6 * scale, "column {j}: {diff} vs {scale}");
            }
        }
    }

    #[test]
    fn pattern_counts() {
        let mesh = StructuredMesh::new(1).unwrap();
        let p = symbolic_pattern(&mesh);
        let center = mesh.node_id(1, 1, 1);
        assert_eq!(p.row(center).len(), 27);
        // three free rows (x = y = 1) couple to all 27 nodes; the rest are constraints
        assert_eq!(p.nnz(), 3 * 27 + 24);

        let mesh = StructuredMesh::new(2).unwrap();
        let p = symbolic_pattern(&mesh);
        assert_eq!(p.row(mesh.node_id(2, 2, 2)).len(), 125);
        assert_eq!(p.row(mesh.node_id(1, 1, 1)).len(), 27);
        assert_eq!(p.row(mesh.node_id(0, 1, 1)).len(), 1);
        for i in 0..p.n {
            assert!(p.row(i).windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn pattern_matches_element_enumeration() {
        let mesh = StructuredMesh::new(3).unwrap();
        let p = symbolic_pattern(&mesh);
        let mut rows: Vec<std::collections::BTreeSet<u32>> = vec![Default::default(); mesh.n_nodes()];
        for e in 0..mesh.n_elements() {
            let ids = mesh.element_nodes(e).unwrap();
            for &i in &ids {
                if !mesh.is_dirichlet(i) {
                    rows[i].extend(ids.iter().map(|&c| c as u32));
                }
            }
        }
        for (i, row) in rows.iter_mut().enumerate() {
            if mesh.is_dirichlet(i) {
                row.insert(i as u32);
            }
            assert_eq!(p.row(i), row.iter().copied().collect::<Vec<_>>().as_slice());
        }
    }

    #[test]
    fn jacobian_structure_independent_of_state() {
        let mesh = StructuredMesh::new(2).unwrap();
        let pattern = symbolic_pattern(&mesh);
        for seed in 0..3 {
            let j = assemble_jacobian(&mesh, &random_u(&mesh, seed), 6.8).unwrap();
            assert_eq!(j.pattern(), pattern);
        }
    }

    #[test]
    fn parallel_assembly_is_bit_identical() {
        let mesh = StructuredMesh::new(4).unwrap();
        let u = random_u(&mesh, 4);
        let asm = Assembler::new(&mesh);
        let seq = Executor::sequential(mesh.n_nodes());
        let j1 = asm.jacobian(&u, 6.8, &seq).unwrap();
        let r1 = asm.residual(&u, 6.8, &seq).unwrap();
        for p in [2, 3, 5] {
            let exec = Executor::for_mesh(&mesh, p, ReductionMode::Deterministic).unwrap();
            assert_eq!(asm.jacobian(&u, 6.8, &exec).unwrap(), j1);
            assert_eq!(asm.residual(&u, 6.8, &exec).unwrap(), r1);
            let free = Executor::for_mesh(&mesh, p, ReductionMode::FreeOrder).unwrap();
            let ja = asm.jacobian(&u, 6.8, &free).unwrap();
            for (a, b) in ja.values().iter().zip(j1.values()) {
                assert!((a - b).abs() <= 1e-14 * b.abs().max(1.0));
            }
        }
    }
}
