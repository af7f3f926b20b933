//! Dense linear algebra and reproducible sampling.

pub mod io;
pub mod linalg;
pub mod matrix;
pub mod rng;

pub use linalg::{
    checked_inverse, condition_number, expm, inv_sqrtm_pd, inverse, power_iteration,
    power_iteration_from, qr, sqrtm_psd, svd, sym_eigen, PowerIteration, SvdResult, SymEigen,
};
pub use matrix::Matrix;
pub use rng::{child_seed, gaussian_matrix, random_orthonormal, Rng};
