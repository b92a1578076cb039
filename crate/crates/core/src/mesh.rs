//! Structured tri-quadratic hexahedral mesh of the unit cube.
//!
//! Nodes are numbered lexicographically with x fastest, then y, then z, so
//! node `(i, j, k)` has id `i + n_axis * (j + n_axis * k)`. Element `e`
//! with element indices `(ex, ey, ez)` owns the 3×3×3 node sub-grid starting
//! at `(2ex, 2ey, 2ez)`.

use crate::error::{Error, Result};

/// Boundary classification of a node.
///
/// Nodes on the x- and y-faces carry homogeneous Dirichlet constraints.
/// Nodes on the z-faces see a natural (Neumann) condition that adds nothing
/// to the residual, so they are assembled exactly like interior nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeClass {
    DirichletXY,
    Interior,
}

/// Number of nodes per tri-quadratic element.
pub const NODES_PER_ELEMENT: usize = 27;

#[derive(Debug, Clone)]
pub struct StructuredMesh {
    n_e: usize,
    n_axis: usize,
    classes: Vec<NodeClass>,
}

impl StructuredMesh {
    pub fn new(n_e: usize) -> Result<Self> {
        if n_e == 0 {
            return Err(Error::InvalidSize("mesh needs at least one element per axis".into()));
        }
        let n_axis = 2 * n_e + 1;
        let n_nodes = n_axis
            .checked_mul(n_axis)
            .and_then(|v| v.checked_mul(n_axis))
            .filter(|&v| v <= u32::MAX as usize)
            .ok_or_else(|| Error::InvalidSize(format!("n_e = {n_e} overflows 32-bit node ids")))?;
        let last = n_axis - 1;
        let mut classes = Vec::with_capacity(n_nodes);
        for _k in 0..n_axis {
            for j in 0..n_axis {
                for i in 0..n_axis {
                    let on_face = i == 0 || i == last || j == 0 || j == last;
                    classes.push(if on_face { NodeClass::DirichletXY } else { NodeClass::Interior });
                }
            }
        }
        Ok(Self { n_e, n_axis, classes })
    }

    /// Elements per axis.
    pub fn n_e(&self) -> usize {
        self.n_e
    }

    /// Node lines per axis, `2 n_e + 1`.
    pub fn n_axis(&self) -> usize {
        self.n_axis
    }

    /// Total node count (= degrees of freedom).
    pub fn n_nodes(&self) -> usize {
        self.classes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.n_e * self.n_e * self.n_e
    }

    /// Node spacing `1 / (2 n_e)`.
    pub fn node_spacing(&self) -> f64 {
        1.0 / (2 * self.n_e) as f64
    }

    /// Edge length of an element, `1 / n_e`.
    pub fn element_size(&self) -> f64 {
        1.0 / self.n_e as f64
    }

    /// Nodes in one constant-z plane.
    pub fn plane_size(&self) -> usize {
        self.n_axis * self.n_axis
    }

    pub fn node_id(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.n_axis * (j + self.n_axis * k)
    }

    pub fn node_index(&self, id: usize) -> (usize, usize, usize) {
        let n = self.n_axis;
        (id % n, (id / n) % n, id / (n * n))
    }

    pub fn node_coords(&self, id: usize) -> [f64; 3] {
        let (i, j, k) = self.node_index(id);
        let h = self.node_spacing();
        [i as f64 * h, j as f64 * h, k as f64 * h]
    }

    pub fn element_index(&self, e: usize) -> (usize, usize, usize) {
        let n = self.n_e;
        (e % n, (e / n) % n, e / (n * n))
    }

    /// The 27 node ids of element `e` in local tensor-product order (x fastest).
    pub fn element_nodes(&self, e: usize) -> Result<[usize; NODES_PER_ELEMENT]> {
        if e >= self.n_elements() {
            return Err(Error::OutOfRange { index: e, len: self.n_elements() });
        }
        Ok(self.element_nodes_unchecked(e))
    }

    pub(crate) fn element_nodes_unchecked(&self, e: usize) -> [usize; NODES_PER_ELEMENT] {
        let (ex, ey, ez) = self.element_index(e);
        let mut ids = [0usize; NODES_PER_ELEMENT];
        let mut a = 0;
        for c in 0..3 {
            for b in 0..3 {
                for l in 0..3 {
                    ids[a] = self.node_id(2 * ex + l, 2 * ey + b, 2 * ez + c);
                    a += 1;
                }
            }
        }
        ids
    }

    pub fn classify_node(&self, id: usize) -> Result<NodeClass> {
        self.classes
            .get(id)
            .copied()
            .ok_or(Error::OutOfRange { index: id, len: self.classes.len() })
    }

    pub fn classes(&self) -> &[NodeClass] {
        &self.classes
    }

    pub fn is_dirichlet(&self, id: usize) -> bool {
        self.classes[id] == NodeClass::DirichletXY
    }

    /// Element indices along one axis whose closure contains node line `i`.
    pub(crate) fn elements_touching_line(&self, i: usize) -> std::ops::RangeInclusive<usize> {
        let lo = if i == 0 { 0 } else { (i - 1) / 2 };
        let hi = (i / 2).min(self.n_e - 1);
        lo..=hi
    }

    /// Elements whose closure intersects the node planes `k_lo..k_hi`, in ascending element order.
    pub(crate) fn elements_touching_planes(&self, k_lo: usize, k_hi: usize) -> std::ops::Range<usize> {
        if k_lo >= k_hi {
            return 0..0;
        }
        let ez_lo = *self.elements_touching_line(k_lo).start();
        let ez_hi = *self.elements_touching_line(k_hi - 1).end();
        let per_layer = self.n_e * self.n_e;
        ez_lo * per_layer..(ez_hi + 1) * per_layer
    }
}
