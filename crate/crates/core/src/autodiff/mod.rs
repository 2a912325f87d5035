//! Reverse-mode differentiation over the tensor kernels.
//!
//! A [`Tape`] records every operation applied to [`Var`]s that descend from a
//! leaf created with [`Tape::leaf`]. [`Tape::backward`] walks the record in
//! reverse creation order (a valid topological order), visiting each node once.

mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{finite_diff_check, GradCheck, GradCheckReport};
pub use tape::{BackwardArgs, Gradients, Tape, Var};
