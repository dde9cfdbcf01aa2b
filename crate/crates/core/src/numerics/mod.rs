//! Dense tensors, a reverse-mode gradient tape, and tensor serialization.

pub mod io;
pub mod tape;
pub mod tensor;

pub use tape::{Tape, Var};
pub use tensor::{clamp_nonneg, matmul, softmax_rows, Tensor};
