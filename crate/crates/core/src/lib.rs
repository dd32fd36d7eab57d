//! Shared-control planning for a dual-arm mecanum-base manipulator.

// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alilqr;
pub mod armkin;
pub mod basekin;
pub mod constraints;
pub mod error;
pub mod intent;
pub mod sharedcost;
pub mod worldmodel;

pub use error::{Error, Result};
