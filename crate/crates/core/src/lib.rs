//! Physics-informed identification of single-track vehicle dynamics.

// `!(x > 0.0)` is the NaN-rejecting form used throughout validation
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod ad;
pub mod coefficients;
pub mod datagen;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod mpc;
pub mod pinn;

pub use error::{Error, Result};
