//! Dense numerics, seeded random streams and the reverse-mode tape.
//!
//! Reductions sum left to right in index order, so every result is bitwise
//! reproducible for a fixed input and seed.

mod rng;
mod tape;
mod tensor;

pub use rng::RngStream;
pub use tape::{sigmoid, softplus, CustomOp, Gradients, Tape, Var};
pub use tensor::{conv1d, matmul, matvec, matvec_t, Tensor};
