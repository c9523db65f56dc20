//! Learned digital over-the-air aggregation for federated edge learning.
//!
//! Devices quantise fragments of their model updates against a per-round
//! codebook, send the matching codeword of a shared unsourced-random-access
//! codebook, and the base station decodes the superposed signal into
//! per-codeword activity counts with an unrolled, trainable message-passing
//! decoder. The counts are then aggregated with a symmetric rule.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod channel;
pub mod decoder;
pub mod error;
pub mod feelsim;
pub mod numkernel;
pub mod trainer;
pub mod uracode;
pub mod vq;

pub use error::{Error, Result};
