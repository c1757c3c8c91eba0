//! Particle simulation and stability certification for systems of non-local
//! continuity equations `∂_t ρ^i + div(ρ^i V^i(t, x, ρ ∗ η^i)) = 0`.

// `!(x >= 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod fields;
pub mod flow;
pub mod kernels;
pub mod measures;
pub mod moduli;
pub mod quadrature;
pub mod sampling;
pub mod scenario;
pub mod stability;
pub mod verification;

pub use error::{Error, Result};
