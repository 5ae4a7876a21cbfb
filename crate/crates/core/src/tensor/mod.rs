//! Dense arrays, a reverse-mode tape, Adam, checkpoints and gradient checks.

mod adam;
mod array;
pub mod checkpoint;
pub mod gradcheck;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use array::NumArray;
pub use tape::{Grads, Tape, Var};

pub(crate) use tape::softmax;
pub use tape::cosine;
