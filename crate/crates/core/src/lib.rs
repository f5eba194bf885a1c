//! S4D state-space layers inside Conformer-style convolution modules.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: complex helpers, causal convolution (direct and FFT),
//!   linear-recurrence scans and a reverse-mode differentiation tape.
//! - [`s4d`]: the diagonal state-space layer, its initialisation schemes,
//!   zero-order-hold discretisation and its two equivalent forward modes.
//! - [`conv_module`]: the gated convolution module with its four cores
//!   (plain depthwise convolution, S4 replacement, convolution followed by
//!   an S4, and an S4-generated finite kernel) plus an encoder built from it.
//! - [`streaming`]: chunked online inference with carried state.
//! - [`training`]: synthetic tasks, Adam, the training loop and a
//!   finite-difference gradient checker.
//! - [`config`] and [`checkpoint`]: the run configuration schema and the
//!   binary checkpoint format used by the command-line tool.

pub mod bench;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod conv_module;
pub mod error;
pub mod numerics;
pub mod params;
pub mod s4d;
pub mod streaming;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book;
