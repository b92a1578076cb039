//! Shared fixtures for the benchmarks.

use pgmres::experiments::first_newton_system;
use pgmres::{CsrMatrix, Executor, ReductionMode, StructuredMesh};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LAMBDA: f64 = 6.8;

/// First Newton system on an `n_e` mesh, assembled sequentially.
pub struct Fixture {
    pub mesh: StructuredMesh,
    pub jacobian: CsrMatrix,
    pub rhs: Vec<f64>,
}

impl Fixture {
    pub fn new(n_e: usize) -> Self {
        let mesh = StructuredMesh::new(n_e).expect("mesh");
        let (jacobian, rhs) = first_newton_system(&mesh, LAMBDA, &Executor::sequential(mesh.n_nodes())).expect("assembly");
        Self { mesh, jacobian, rhs }
    }

    pub fn executor(&self, p: usize) -> Executor {
        Executor::for_mesh(&self.mesh, p, ReductionMode::Deterministic).expect("executor")
    }
}

/// Reproducible uniform vector in `[-1, 1)`.
pub fn random_vector(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}
