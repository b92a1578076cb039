//! Compressed sparse row storage and the vector kernels GMRES is built on.

use std::io::Write;

use crate::error::{check_len, Error, Result};

/// Block length of the fixed reduction grid used by [`dot`].
///
/// Inner products are summed sequentially inside each block and the block
/// partials are then combined pairwise. The grid does not depend on how work
/// is split across workers, which is what makes parallel reductions
/// bit-identical to the sequential ones.
pub const REDUCTION_BLOCK: usize = 1024;

/// CSR matrix with 4-byte column indices and 8-byte values.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
}

/// Column structure of a CSR matrix without values.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityPattern {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<u32>,
}

impl SparsityPattern {
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }
}

impl CsrMatrix {
    /// Builds a matrix, checking every structural invariant.
    pub fn new(n: usize, row_ptr: Vec<usize>, col_idx: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        check_len(n + 1, row_ptr.len())?;
        check_len(col_idx.len(), values.len())?;
        if row_ptr[0] != 0 || row_ptr[n] != col_idx.len() {
            return Err(Error::InvalidSize("row_ptr must start at 0 and end at nnz".into()));
        }
        for i in 0..n {
            if row_ptr[i] > row_ptr[i + 1] {
                return Err(Error::InvalidSize(format!("row_ptr decreases at row {i}")));
            }
            let cols = &col_idx[row_ptr[i]..row_ptr[i + 1]];
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidSize(format!("columns of row {i} not strictly increasing")));
            }
            if let Some(&c) = cols.last() {
                if c as usize >= n {
                    return Err(Error::OutOfRange { index: c as usize, len: n });
                }
            }
        }
        Ok(Self { n, row_ptr, col_idx, values })
    }

    /// A matrix with the given pattern and all values zero.
    pub fn from_pattern(pattern: SparsityPattern) -> Self {
        let nnz = pattern.nnz();
        Self { n: pattern.n, row_ptr: pattern.row_ptr, col_idx: pattern.col_idx, values: vec![0.0; nnz] }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n as u32).collect(),
            values: vec![1.0; n],
        }
    }

    /// Drops explicit zeros; `tol` is an absolute threshold.
    pub fn from_dense(rows: &[Vec<f64>], tol: f64) -> Result<Self> {
        let n = rows.len();
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for row in rows {
            check_len(n, row.len())?;
            for (j, &v) in row.iter().enumerate() {
                if v.abs() > tol {
                    col_idx.push(j as u32);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self::new(n, row_ptr, col_idx, values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[u32] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn pattern(&self) -> SparsityPattern {
        SparsityPattern { n: self.n, row_ptr: self.row_ptr.clone(), col_idx: self.col_idx.clone() }
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    /// Position of entry `(i, j)` inside `values`, if it is stored.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let start = self.row_ptr[i];
        let cols = &self.col_idx[start..self.row_ptr[i + 1]];
        cols.binary_search(&(j as u32)).ok().map(|p| start + p)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |p| self.values[p])
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n]; self.n];
        for (i, row) in out.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                row[c as usize] = v;
            }
        }
        out
    }

    /// `12 nnz + 4 (n + 1)` bytes: 8-byte values, 4-byte column indices and
    /// 4-byte row offsets.
    pub fn memory_footprint(&self) -> usize {
        memory_footprint(self.n, self.nnz())
    }

    /// Writes the matrix in Matrix Market coordinate format (1-based indices).
    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", self.n, self.n, self.nnz())?;
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                writeln!(w, "{} {} {:.17e}", i + 1, c + 1, v)?;
            }
        }
        Ok(())
    }
}

pub fn memory_footprint(n: usize, nnz: usize) -> usize {
    12 * nnz + 4 * (n + 1)
}

/// `y = A v`.
pub fn spmv(a: &CsrMatrix, v: &[f64], y: &mut [f64]) -> Result<()> {
    check_len(a.n, v.len())?;
    check_len(a.n, y.len())?;
    spmv_rows(a, 0..a.n, v, y);
    Ok(())
}

/// Rows `rows` of `A v`, written to `y[0..rows.len()]`.
pub(crate) fn spmv_rows(a: &CsrMatrix, rows: std::ops::Range<usize>, v: &[f64], y: &mut [f64]) {
    let start = rows.start;
    for i in rows {
        let lo = a.row_ptr[i];
        let hi = a.row_ptr[i + 1];
        let mut acc = 0.0;
        for (&c, &val) in a.col_idx[lo..hi].iter().zip(&a.values[lo..hi]) {
            acc += val * v[c as usize];
        }
        y[i - start] = acc;
    }
}

pub fn spmv_alloc(a: &CsrMatrix, v: &[f64]) -> Result<Vec<f64>> {
    let mut y = vec![0.0; a.n];
    spmv(a, v, &mut y)?;
    Ok(y)
}

/// Sequential sum of `a[i] * b[i]` over one reduction block.
#[inline]
pub(crate) fn block_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Pairwise (tree) summation of block partials in index order.
pub(crate) fn pairwise_sum(parts: &[f64]) -> f64 {
    match parts.len() {
        0 => 0.0,
        1 => parts[0],
        n => {
            let mid = n.div_ceil(2);
            pairwise_sum(&parts[..mid]) + pairwise_sum(&parts[mid..])
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    Ok(dot_unchecked(a, b))
}

pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    if a.len() <= REDUCTION_BLOCK {
        return block_dot(a, b);
    }
    let parts: Vec<f64> = a
        .chunks(REDUCTION_BLOCK)
        .zip(b.chunks(REDUCTION_BLOCK))
        .map(|(x, y)| block_dot(x, y))
        .collect();
    pairwise_sum(&parts)
}

pub fn norm2(a: &[f64]) -> f64 {
    dot_unchecked(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m: f64, x| m.max(x.abs()))
}

/// Returns `alpha a + b`.
pub fn axpy(alpha: f64, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_len(a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| alpha * x + y).collect())
}

/// `y += alpha x`.
pub fn axpy_in_place(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(alpha: f64, x: &mut [f64]) {
    for v in x {
        *v *= alpha;
    }
}
