//! Reverse-mode automatic differentiation over f64 matrices.
//!
//! A [`Tape`] records each forward operation; [`Tape::backward`] walks
//! the record in reverse and accumulates gradients into the
//! [`ParamSet`] that owns the trainable [`Parameter`]s. Tapes are
//! rebuilt every forward pass, so control flow (dropout masks, top-k
//! selections, noise) is captured as data on the tape.

mod adam;
mod gradcheck;
mod params;
mod tape;

pub use adam::Adam;
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use params::{glorot_uniform, ParamId, ParamSet, Parameter};
pub(crate) use tape::topk_select;
pub use tape::{AutodiffError, Tape, Var};
