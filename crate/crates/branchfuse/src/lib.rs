//! Structural re-parameterization toolkit: build training-time multi-branch
//! convolution blocks and losslessly collapse them into a single convolution,
//! with forward-equivalence checking, parameter accounting and fused-vs-
//! branched benchmarking.

pub mod error;
pub mod tensor;
pub mod transforms;
pub mod blocks;
pub mod verify;
pub mod io;

pub use error::{Error, Result};
