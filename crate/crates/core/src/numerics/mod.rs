//! Tensors, the autodiff tape, seeded randomness, and parameters.

pub mod gradcheck;
pub mod kernels;
mod param;
mod rng;
mod tape;
mod tensor;

pub use param::{Module, Param};
pub use rng::Rng;
pub use tape::{Segment, Tape, Var};
pub use tensor::{checksum, Tensor};
