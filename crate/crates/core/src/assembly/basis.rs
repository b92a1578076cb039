//! Tri-quadratic Lagrange basis on the reference cube `[-1, 1]^3` and the
//! 3×3×3 Gauss–Legendre rule.

use crate::mesh::NODES_PER_ELEMENT;

/// Values and reference-coordinate gradients of the 27 basis functions at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisEval {
    pub values: [f64; NODES_PER_ELEMENT],
    pub gradients: [[f64; 3]; NODES_PER_ELEMENT],
}

/// 1-D quadratic Lagrange polynomials on the nodes {-1, 0, 1} and their derivatives.
fn lagrange_1d(t: f64) -> ([f64; 3], [f64; 3]) {
    (
        [0.5 * t * (t - 1.0), 1.0 - t * t, 0.5 * t * (t + 1.0)],
        [t - 0.5, -2.0 * t, t + 0.5],
    )
}

/// Evaluates the basis at reference point `(xi, eta, zeta)`.
///
/// Local node `a = l + 3 m + 9 n` sits at reference coordinates
/// `(l - 1, m - 1, n - 1)`, matching the ordering of
/// [`StructuredMesh::element_nodes`](crate::mesh::StructuredMesh::element_nodes).
pub fn shape_eval(xi: f64, eta: f64, zeta: f64) -> BasisEval {
    let (lx, dx) = lagrange_1d(xi);
    let (ly, dy) = lagrange_1d(eta);
    let (lz, dz) = lagrange_1d(zeta);
    let mut values = [0.0; NODES_PER_ELEMENT];
    let mut gradients = [[0.0; 3]; NODES_PER_ELEMENT];
    for n in 0..3 {
        for m in 0..3 {
            for l in 0..3 {
                let a = l + 3 * m + 9 * n;
                values[a] = lx[l] * ly[m] * lz[n];
                gradients[a] = [dx[l] * ly[m] * lz[n], lx[l] * dy[m] * lz[n], lx[l] * ly[m] * dz[n]];
            }
        }
    }
    BasisEval { values, gradients }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    /// Tensor product of the 3-point Gauss–Legendre rule.
    pub fn gauss_3x3x3() -> Self {
        let r = (3.0f64 / 5.0).sqrt();
        let x = [-r, 0.0, r];
        let w = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
        let mut points = Vec::with_capacity(27);
        let mut weights = Vec::with_capacity(27);
        for k in 0..3 {
            for j in 0..3 {
                for i in 0..3 {
                    points.push([x[i], x[j], x[k]]);
                    weights.push(w[i] * w[j] * w[k]);
                }
            }
        }
        Self { points, weights }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}
