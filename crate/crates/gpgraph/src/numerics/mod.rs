//! Minimal dense-array computation with reverse-mode gradients.
//!
//! Everything downstream of the dataset loaders runs on [`Array`] values
//! recorded on a [`Tape`]. 64-bit floats throughout: the networks are tiny,
//! so precision beats speed and tight gradient-check tolerances stay
//! achievable.

mod array;
mod grad_check;
#[cfg(test)]
mod primitive_checks;
mod tape;

pub use array::Array;
pub use grad_check::grad_check;
pub use tape::{Gradients, Tape, Var};
