//! Dense linear algebra, seeded sampling and symmetric eigensolvers.
//!
//! Everything is `f64`; matrices here never exceed a few thousand entries.

mod eigen;
mod matrix;
mod rng;

pub use eigen::{min_eigenvalue, solve_spd, symmetric_eigenvalues, MAX_JACOBI_ORDER, SYMMETRY_TOL};
pub(crate) use matrix::take_u64;
pub use matrix::Matrix;
pub use rng::{gaussian_matrix, sign_vector, SeededRng};
