//! Dense linear algebra and the shared PRNG.

mod matrix;
mod rng;
mod svd;

pub use matrix::{frobenius_norm, matmul, Matrix};
pub use rng::Prng;
pub use svd::{canonicalize, svd_thin, SvdView, JACOBI_TOL, MAX_SWEEPS};
