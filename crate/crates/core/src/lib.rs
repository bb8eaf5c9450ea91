//! Module-wise selective low-rank adaptation through a differentiable
//! adaptation matrix, together with numerical checks of the Gram-matrix
//! convergence theory behind it.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense matrices, seeded counter-based sampling, Jacobi eigensolver, Cholesky.
//! - [`adapters`]: low-rank adapters `ΔW = (α/r)·B·A`, gated forward passes, the shared bank.
//! - [`models`]: the single-hidden-layer [`models::TheoryNet`] and the micro-transformer
//!   [`models::ModularNet`] with six adaptable linear maps per layer.
//! - [`dam`]: the adaptation matrix: relaxation, bi-level updates, top-K discretization, sharing.
//! - [`data`]: synthetic datasets, planted-module tasks, CSV input/output, splits.
//! - [`pipeline`]: the two-stage training driver, reports and checkpoints.
//! - [`theory`]: Monte-Carlo Gram matrices, eigenvalue comparisons, convergence fits.

pub mod adapters;
pub mod dam;
pub mod data;
pub mod error;
pub mod models;
pub mod numerics;
pub mod pipeline;
pub mod theory;

pub use error::{Error, Result};
pub use numerics::{Matrix, SeededRng};
