//! Batch normalization with condensation-gated running statistics.
//!
//! The crate has hand-written forward and backward passes for BN, the gated
//! and rectified variant (UBN), and the IN/LN/GN baselines, a finite-difference
//! gradient checker, condensation probes, and a small deterministic training
//! harness.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod monitor;
pub mod norm;
pub mod tensor;

pub use error::{Error, Result};
