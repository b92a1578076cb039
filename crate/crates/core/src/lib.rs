//! Newton–Krylov solver for the 3-D Bratu problem.
//!
//! The pipeline runs from a structured 27-node hexahedral mesh of the unit
//! cube ([`mesh`]) through Galerkin assembly of the residual and Jacobian in
//! CSR form ([`assembly`], [`sparse`]) to right-preconditioned restarted
//! GMRES(m) ([`krylov`]) with a deflation preconditioner built from Ritz
//! vectors of each restart cycle ([`deflation`]), driven by Newton's method
//! ([`nonlinear`]). Kernels run on a row-slab worker layer that books time
//! as computation, halo exchange, or reduction ([`parallel`]).
//! [`experiments`] reproduces the benchmark tables as CSV.

pub mod assembly;
pub mod deflation;
pub mod error;
pub mod experiments;
pub mod krylov;
pub mod mesh;
pub mod nonlinear;
pub mod parallel;
pub mod sparse;

pub use assembly::{assemble_jacobian, assemble_residual, symbolic_pattern, Assembler};
pub use deflation::{DeflationConfig, Deflator};
pub use error::{Error, Result};
pub use krylov::{gmres_restarted, GmresConfig, GmresReport, IdentityPreconditioner, LinearOperator, Preconditioner};
pub use mesh::{NodeClass, StructuredMesh};
pub use nonlinear::{newton_solve, NewtonConfig, NewtonTrace};
pub use parallel::{Executor, Partition, ReductionMode, TimingBreakdown};
pub use sparse::CsrMatrix;
