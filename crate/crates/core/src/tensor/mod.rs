//! Dense `f64` tensors, a reverse-mode tape, and a finite-difference checker.

mod dense;
pub mod gradcheck;
mod params;
mod tape;

pub use dense::{BinaryOp, Broadcast, Mode, Tensor};
pub use gradcheck::{finite_diff_check, tape_fn, GradCheckEntry, GradCheckReport};
pub use params::{Bindings, ParamStore};
pub use tape::{CellRect, Gradients, Tape, Var};
