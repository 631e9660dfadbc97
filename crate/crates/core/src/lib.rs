//! Self-homodyne tomography of the twin-beam output of a nondegenerate
//! parametric amplifier.
//!
//! The crate is organised bottom-up:
//!
//! * [`fockmath`]: Fock-space special functions (Laguerre, Hermite
//!   functions, displacement-operator matrix elements).
//! * [`nopa`]: analytic model of the twin-beam state, its photon statistics
//!   and joint quadrature distributions.
//! * [`sampler`]: seeded Monte-Carlo generation of homodyne records.
//! * [`kernel`]: pattern-function kernels `<n|K_eta(x - X_phi)|m>`.
//! * [`estimator`]: density-matrix reconstruction and derived statistics.
//! * [`channels`]: Gaussian-noise and loss dressing channels used as oracles.
//! * [`records`]: CSV/JSON file formats.
//! * [`validate`]: built-in oracle checks.
//!
//! Quadratures follow `X_phi = (a e^{-i phi} + a^dag e^{i phi}) / 2`, so the
//! vacuum quadrature variance is 1/4.

pub mod channels;
pub mod error;
pub mod estimator;
pub mod fockmath;
pub mod kernel;
pub mod nopa;
pub mod quadrature;
pub mod records;
pub mod sampler;
pub mod validate;

pub use error::{Error, Result};
pub use num_complex::Complex64;

/// Crate version embedded into every output file.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
