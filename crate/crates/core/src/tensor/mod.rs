//! Dense arrays and a dynamic reverse-mode differentiation tape.
//!
//! The tape is rebuilt on every forward pass (build-as-you-run), which keeps
//! sequence-length- and mask-dependent control flow out of the engine: the
//! scan modules just run, and whatever they record is what gets replayed in
//! reverse.

mod array;
mod fdcheck;
mod kernels;
mod tape;

pub use array::Array;
pub use fdcheck::finite_difference_check;
pub use tape::{BinaryKind, CustomOp, ReduceKind, Tape, UnaryKind, Var};
