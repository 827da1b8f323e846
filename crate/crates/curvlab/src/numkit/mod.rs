//! Dense linear algebra and deterministic sampling shared by every
//! other module.
//!
//! Everything here operates on plain `f64`: second-derivative
//! estimation downstream is too noise-sensitive for anything narrower.
//! Functions are pure over immutable inputs and safe to call
//! concurrently; [`RngStream`] is the one mutable object and is never
//! shared between workers.

mod linalg;
mod matrix;
mod rng;

pub use linalg::{det, inverse, numeric_rank, singular_values, sym_eigen};
pub use linalg::{DEFAULT_RANK_TOL, SYM_EIGEN_CAP};
pub use matrix::{dot, norm, Matrix, ParamVector};
pub use rng::{RngStream, RNG_ALGORITHM};
