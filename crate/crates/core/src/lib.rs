//! Induced maps, discretized transfer operators and operator renewal
//! sequences for intermittent interval maps and their skew-product
//! extensions.
//!
//! The crate is `no_std` with `alloc`; the `std` feature (on by default) only
//! swaps the elementary functions for the platform ones, which are faster.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` is meant to catch NaN; index loops mirror the formulas
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod correlate;
pub mod error;
pub mod fit;
pub mod maps;
pub mod math;
pub mod norms;
pub mod renewal;
pub mod sparse;
pub mod tails;
pub mod transfer;

pub use error::{Error, Result};
