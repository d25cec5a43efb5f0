//! Low-level numerical kernels shared by the simulation, learning and filtering code.

mod linalg;
mod quaternion;
mod rk4;
mod rng;

pub use linalg::{
    cholesky, cholesky_with_retry, condition_covariance, default_jitter, gaussian_sample,
    gaussian_sample_with_factor, is_symmetric, solve_spd, symmetrize_jitter,
};
pub use quaternion::Quaternion;
pub use rk4::rk4_step;
pub use rng::{derive_seed, RngStream};
