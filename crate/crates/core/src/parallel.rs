//! Row-block partitioning and the shared-memory worker layer.
//!
//! Each worker owns a contiguous block of rows that corresponds to a slab of
//! whole z-planes of the mesh. Before a matrix-vector product a worker copies
//! the off-block vector entries its rows reference (its halo) into a private
//! buffer; this copy is what the timing layer books as local communication.
//! Reductions combine per-block partials on a fixed grid, booked as global
//! communication.

use std::ops::Range;
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::mesh::StructuredMesh;
use crate::sparse::{self, block_dot, pairwise_sum, CsrMatrix, REDUCTION_BLOCK};

/// Off-block vector entries a worker reads, split into the spans below and
/// above its own row block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Halo {
    /// Exact set of referenced off-block indices, ascending.
    pub indices: Vec<usize>,
    pub below: Range<usize>,
    pub above: Range<usize>,
}

impl Halo {
    fn empty(at: usize) -> Self {
        Self { indices: Vec::new(), below: at..at, above: at..at }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    n: usize,
    plane_size: usize,
    row_ranges: Vec<Range<usize>>,
    halos: Vec<Halo>,
}

impl Partition {
    /// One block covering all `n` rows; usable for any operator.
    pub fn single(n: usize) -> Self {
        Self { n, plane_size: n.max(1), row_ranges: vec![0..n], halos: vec![Halo::empty(0)] }
    }

    /// Splits the rows of a structured mesh into `p` z-slabs.
    ///
    /// Planes are dealt out as evenly as possible with the larger slabs first,
    /// so block sizes differ by at most one plane.
    pub fn slabs(mesh: &StructuredMesh, p: usize) -> Result<Self> {
        let n_axis = mesh.n_axis();
        if p == 0 || p > n_axis {
            return Err(Error::InvalidConfig(format!("worker count {p} must lie in 1..={n_axis}")));
        }
        let plane = mesh.plane_size();
        let base = n_axis / p;
        let extra = n_axis % p;
        let mut row_ranges = Vec::with_capacity(p);
        let mut k0 = 0;
        for w in 0..p {
            let planes = base + usize::from(w < extra);
            row_ranges.push(k0 * plane..(k0 + planes) * plane);
            k0 += planes;
        }
        let halos = row_ranges.iter().map(|r| slab_halo(mesh, r.start / plane, r.end / plane)).collect();
        Ok(Self { n: mesh.n_nodes(), plane_size: plane, row_ranges, halos })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn workers(&self) -> usize {
        self.row_ranges.len()
    }

    pub fn row_ranges(&self) -> &[Range<usize>] {
        &self.row_ranges
    }

    pub fn halos(&self) -> &[Halo] {
        &self.halos
    }

    /// Rows per z-plane of the underlying mesh.
    pub fn plane_size(&self) -> usize {
        self.plane_size
    }
}

/// Halo of the slab of planes `k_lo..k_hi`: nodes outside the slab that
/// share an element with an interior node inside it. Dirichlet rows only
/// reference their own diagonal.
fn slab_halo(mesh: &StructuredMesh, k_lo: usize, k_hi: usize) -> Halo {
    let n = mesh.n_axis();
    let plane = mesh.plane_size();
    let mut below = std::collections::BTreeSet::new();
    let mut above = std::collections::BTreeSet::new();
    let boundary_planes = [k_lo, k_lo + 1, k_hi.saturating_sub(2), k_hi.saturating_sub(1)];
    for &k in boundary_planes.iter().filter(|&&k| k >= k_lo && k < k_hi) {
        let kr = coupled_lines(mesh, k);
        if kr.start >= k_lo && kr.end <= k_hi {
            continue;
        }
        for j in 1..n - 1 {
            let jr = coupled_lines(mesh, j);
            for i in 1..n - 1 {
                let ir = coupled_lines(mesh, i);
                for kk in kr.clone().filter(|&kk| kk < k_lo || kk >= k_hi) {
                    let set = if kk < k_lo { &mut below } else { &mut above };
                    for jj in jr.clone() {
                        for ii in ir.clone() {
                            set.insert(mesh.node_id(ii, jj, kk));
                        }
                    }
                }
            }
        }
    }
    let span = |s: &std::collections::BTreeSet<usize>, at: usize| match (s.first(), s.last()) {
        (Some(&a), Some(&b)) => a..b + 1,
        _ => at..at,
    };
    let below_span = span(&below, k_lo * plane);
    let above_span = span(&above, k_hi * plane);
    let mut indices: Vec<usize> = below.into_iter().collect();
    indices.extend(above);
    Halo { indices, below: below_span, above: above_span }
}

/// Node lines `[lo, hi)` along one axis that share an element with line `i`.
pub(crate) fn coupled_lines(mesh: &StructuredMesh, i: usize) -> Range<usize> {
    let e = mesh.elements_touching_line(i);
    2 * e.start()..2 * e.end() + 3
}

/// Time split of an instrumented run, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimingBreakdown {
    pub compute_s: f64,
    pub local_comm_s: f64,
    pub global_comm_s: f64,
}

impl TimingBreakdown {
    pub fn total_s(&self) -> f64 {
        self.compute_s + self.local_comm_s + self.global_comm_s
    }

    /// `(compute, local, global)` shares in percent.
    pub fn percentages(&self) -> (f64, f64, f64) {
        let t = self.total_s();
        if t <= 0.0 {
            return (100.0, 0.0, 0.0);
        }
        (100.0 * self.compute_s / t, 100.0 * self.local_comm_s / t, 100.0 * self.global_comm_s / t)
    }

    pub fn communication_pct(&self) -> f64 {
        let (_, l, g) = self.percentages();
        l + g
    }

    fn add(&mut self, other: &TimingBreakdown) {
        self.compute_s += other.compute_s;
        self.local_comm_s += other.local_comm_s;
        self.global_comm_s += other.global_comm_s;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum ReductionMode {
    /// Fixed-grid pairwise summation; results do not depend on the worker count.
    #[default]
    Deterministic,
    /// Worker partials are folded in completion order.
    FreeOrder,
}

/// Worker pool bound to a partition, with timing instrumentation.
///
/// All kernels are result-equivalent to the sequential ones in [`sparse`].
/// In [`ReductionMode::Deterministic`] they are bit-identical to them.
pub struct Executor {
    partition: Partition,
    pool: Option<rayon::ThreadPool>,
    mode: ReductionMode,
    timing: Mutex<TimingBreakdown>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor")
            .field("workers", &self.partition.workers())
            .field("mode", &self.mode)
            .finish()
    }
}

#[derive(Clone, Copy, Default)]
struct WorkerTime {
    gather: f64,
    compute: f64,
}

impl Executor {
    pub fn new(partition: Partition, mode: ReductionMode) -> Result<Self> {
        let p = partition.workers();
        let pool = if p > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(p)
                    .thread_name(|i| format!("pgmres-worker-{i}"))
                    .build()
                    .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self { partition, pool, mode, timing: Mutex::new(TimingBreakdown::default()) })
    }

    /// Single worker over `n` rows.
    pub fn sequential(n: usize) -> Self {
        Self::new(Partition::single(n), ReductionMode::Deterministic).expect("single worker never fails")
    }

    /// Slab partition of `mesh` over `p` workers.
    pub fn for_mesh(mesh: &StructuredMesh, p: usize, mode: ReductionMode) -> Result<Self> {
        Self::new(Partition::slabs(mesh, p)?, mode)
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn workers(&self) -> usize {
        self.partition.workers()
    }

    pub fn mode(&self) -> ReductionMode {
        self.mode
    }

    pub fn timing(&self) -> TimingBreakdown {
        *self.timing.lock().unwrap()
    }

    pub fn reset_timing(&self) {
        *self.timing.lock().unwrap() = TimingBreakdown::default();
    }

    /// Books serial work done by the control thread as computation.
    pub fn record_serial(&self, seconds: f64) {
        self.timing.lock().unwrap().compute_s += seconds;
    }

    fn record_region(&self, wall: f64, workers: &[WorkerTime], reduce: f64) {
        let p = workers.len().max(1) as f64;
        let gather = workers.iter().map(|w| w.gather).sum::<f64>() / p;
        let compute = workers.iter().map(|w| w.compute).sum::<f64>() / p;
        // Whatever the region took beyond the mean worker busy time is spent
        // waiting at the join barrier.
        let barrier = (wall - gather - compute).max(0.0);
        self.timing.lock().unwrap().add(&TimingBreakdown {
            compute_s: compute,
            local_comm_s: gather,
            global_comm_s: barrier + reduce,
        });
    }

    /// Runs `f(worker, item)` for every item, one item per worker.
    fn fan_out<T, F>(&self, items: Vec<T>, f: F) -> Vec<WorkerTime>
    where
        T: Send,
        F: Fn(usize, T) -> WorkerTime + Sync + Send,
    {
        match &self.pool {
            None => items.into_iter().enumerate().map(|(w, t)| f(w, t)).collect(),
            Some(pool) => pool.install(|| items.into_par_iter().enumerate().map(|(w, t)| f(w, t)).collect()),
        }
    }

    fn split_rows<'a>(&self, y: &'a mut [f64]) -> Vec<&'a mut [f64]> {
        split_by_ranges(y, self.partition.row_ranges())
    }

    /// `y = A v` with halo gather per worker.
    pub fn spmv(&self, a: &CsrMatrix, v: &[f64], y: &mut [f64]) -> Result<()> {
        check_len(self.partition.n, a.n())?;
        check_len(a.n(), v.len())?;
        check_len(a.n(), y.len())?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("spmv input"));
        }
        let start = Instant::now();
        let ranges = self.partition.row_ranges();
        let halos = self.partition.halos();
        let times = self.fan_out(self.split_rows(y), |w, out| {
            let rows = ranges[w].clone();
            let halo = &halos[w];
            if halo.below.is_empty() && halo.above.is_empty() {
                let t = Instant::now();
                sparse::spmv_rows(a, rows, v, out);
                return WorkerTime { gather: 0.0, compute: t.elapsed().as_secs_f64() };
            }
            let t0 = Instant::now();
            let lo_buf = v[halo.below.clone()].to_vec();
            let hi_buf = v[halo.above.clone()].to_vec();
            let gather = t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            spmv_block(a, rows, v, halo, &lo_buf, &hi_buf, out);
            WorkerTime { gather, compute: t1.elapsed().as_secs_f64() }
        });
        self.record_region(start.elapsed().as_secs_f64(), &times, 0.0);
        Ok(())
    }

    /// Inner product. Deterministic mode reproduces [`sparse::dot`] bit for bit.
    pub fn dot(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        check_len(a.len(), b.len())?;
        Ok(self.dot_unchecked(a, b))
    }

    pub(crate) fn dot_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        let n = a.len();
        if self.pool.is_none() || n <= REDUCTION_BLOCK || n != self.partition.n {
            let t = Instant::now();
            let r = sparse::dot_unchecked(a, b);
            self.record_serial(t.elapsed().as_secs_f64());
            return r;
        }
        let start = Instant::now();
        let blocks = self.block_assignment(n);
        match self.mode {
            ReductionMode::Deterministic => {
                let n_blocks = n.div_ceil(REDUCTION_BLOCK);
                let mut parts = vec![0.0; n_blocks];
                let slots = split_by_ranges(&mut parts, &blocks);
                let times = self.fan_out(slots, |w, slot| {
                    let t = Instant::now();
                    for (s, blk) in slot.iter_mut().zip(blocks[w].clone()) {
                        let r = blk * REDUCTION_BLOCK..((blk + 1) * REDUCTION_BLOCK).min(n);
                        *s = block_dot(&a[r.clone()], &b[r]);
                    }
                    WorkerTime { gather: 0.0, compute: t.elapsed().as_secs_f64() }
                });
                let t = Instant::now();
                let r = if n_blocks == 1 { parts[0] } else { pairwise_sum(&parts) };
                let reduce = t.elapsed().as_secs_f64();
                self.record_region(start.elapsed().as_secs_f64() - reduce, &times, reduce);
                r
            }
            ReductionMode::FreeOrder => {
                let acc = Mutex::new(0.0f64);
                let times = self.fan_out(blocks.clone(), |_, blk| {
                    let t = Instant::now();
                    let r = blk.start * REDUCTION_BLOCK..(blk.end * REDUCTION_BLOCK).min(n);
                    let s = block_dot(&a[r.clone()], &b[r]);
                    let compute = t.elapsed().as_secs_f64();
                    *acc.lock().unwrap() += s;
                    WorkerTime { gather: 0.0, compute }
                });
                let r = acc.into_inner().unwrap();
                self.record_region(start.elapsed().as_secs_f64(), &times, 0.0);
                r
            }
        }
    }

    pub fn norm2(&self, a: &[f64]) -> f64 {
        self.dot_unchecked(a, a).sqrt()
    }

    /// Reduction blocks handled by each worker: the blocks whose first index
    /// falls in the worker's row range.
    fn block_assignment(&self, n: usize) -> Vec<Range<usize>> {
        let n_blocks = n.div_ceil(REDUCTION_BLOCK);
        let ranges = self.partition.row_ranges();
        let mut out = Vec::with_capacity(ranges.len());
        let mut prev = 0;
        for r in ranges {
            let end = r.end.div_ceil(REDUCTION_BLOCK).min(n_blocks).max(prev);
            out.push(prev..end);
            prev = end;
        }
        out
    }

    /// Element-wise map over disjoint row blocks of `y`.
    fn map_rows<F>(&self, y: &mut [f64], f: F)
    where
        F: Fn(Range<usize>, &mut [f64]) + Sync + Send,
    {
        if self.pool.is_none() || y.len() != self.partition.n {
            let t = Instant::now();
            let n = y.len();
            f(0..n, y);
            self.record_serial(t.elapsed().as_secs_f64());
            return;
        }
        let start = Instant::now();
        let ranges = self.partition.row_ranges();
        let times = self.fan_out(self.split_rows(y), |w, out| {
            let t = Instant::now();
            f(ranges[w].clone(), out);
            WorkerTime { gather: 0.0, compute: t.elapsed().as_secs_f64() }
        });
        self.record_region(start.elapsed().as_secs_f64(), &times, 0.0);
    }

    /// `y += alpha x`.
    pub fn axpy(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), y.len());
        self.map_rows(y, |r, out| {
            for (yi, xi) in out.iter_mut().zip(&x[r]) {
                *yi += alpha * xi;
            }
        });
    }

    /// `y = alpha x + beta y`.
    pub fn axpby(&self, alpha: f64, x: &[f64], beta: f64, y: &mut [f64]) {
        debug_assert_eq!(x.len(), y.len());
        self.map_rows(y, |r, out| {
            for (yi, xi) in out.iter_mut().zip(&x[r]) {
                *yi = alpha * xi + beta * *yi;
            }
        });
    }

    pub fn scale(&self, alpha: f64, y: &mut [f64]) {
        self.map_rows(y, |_, out| out.iter_mut().for_each(|v| *v *= alpha));
    }

    pub fn copy(&self, x: &[f64], y: &mut [f64]) {
        self.map_rows(y, |r, out| out.copy_from_slice(&x[r]));
    }

    /// Runs `f(worker, rows, out)` on every worker with its block of `y`.
    /// Used by assembly, which writes whole rows.
    /// `offsets` maps a row to the start of its storage in `y` (`n + 1` entries).
    pub(crate) fn for_each_block<F>(&self, y: &mut [f64], offsets: impl Fn(usize) -> usize, f: F)
    where
        F: Fn(usize, Range<usize>, &mut [f64]) + Sync + Send,
    {
        let ranges = self.partition.row_ranges();
        let value_ranges: Vec<Range<usize>> = ranges.iter().map(|r| offsets(r.start)..offsets(r.end)).collect();
        let start = Instant::now();
        let times = self.fan_out(split_by_ranges(y, &value_ranges), |w, out| {
            let t = Instant::now();
            f(w, ranges[w].clone(), out);
            WorkerTime { gather: 0.0, compute: t.elapsed().as_secs_f64() }
        });
        self.record_region(start.elapsed().as_secs_f64(), &times, 0.0);
    }

    /// Runs `f(worker)` once on each worker.
    pub(crate) fn for_each_worker<F>(&self, f: F)
    where
        F: Fn(usize) + Sync + Send,
    {
        let start = Instant::now();
        let times = self.fan_out((0..self.workers()).collect(), |w, _: usize| {
            let t = Instant::now();
            f(w);
            WorkerTime { gather: 0.0, compute: t.elapsed().as_secs_f64() }
        });
        self.record_region(start.elapsed().as_secs_f64(), &times, 0.0);
    }
}

fn spmv_block(
    a: &CsrMatrix,
    rows: Range<usize>,
    v: &[f64],
    halo: &Halo,
    lo_buf: &[f64],
    hi_buf: &[f64],
    out: &mut [f64],
) {
    let own_lo = rows.start;
    let own_hi = rows.end;
    let row_ptr = a.row_ptr();
    let cols = a.col_idx();
    let vals = a.values();
    for i in rows {
        let mut acc = 0.0;
        for p in row_ptr[i]..row_ptr[i + 1] {
            let c = cols[p] as usize;
            let x = if c < own_lo {
                lo_buf[c - halo.below.start]
            } else if c < own_hi {
                v[c]
            } else {
                hi_buf[c - halo.above.start]
            };
            acc += vals[p] * x;
        }
        out[i - own_lo] = acc;
    }
}

fn split_by_ranges<'a, T>(mut data: &'a mut [T], ranges: &[Range<usize>]) -> Vec<&'a mut [T]> {
    let mut out = Vec::with_capacity(ranges.len());
    let mut offset = ranges.first().map_or(0, |r| r.start);
    data = &mut data[offset..];
    for r in ranges {
        let (head, tail) = std::mem::take(&mut data).split_at_mut(r.end - offset);
        out.push(head);
        data = tail;
        offset = r.end;
    }
    out
}
