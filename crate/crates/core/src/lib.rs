//! Three-species viral reaction-diffusion model on a half-line with a
//! Stefan-type free boundary.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod behavior;
pub mod bvp;
#[cfg(feature = "cli")]
pub mod cli;
pub mod equilibrium;
pub mod error;
pub mod fbsim;
pub mod linalg;
pub mod model;

pub use error::{Error, Result};
