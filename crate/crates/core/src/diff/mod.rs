//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every primitive as it is evaluated. Calling
//! [`Tape::backward`] on a scalar node sweeps the tape in reverse and
//! leaves `d output / d node` on every node that requires a gradient.
//! Tapes are rebuilt every optimisation step, so graphs whose structure
//! changes between iterations (piecewise penalties, data-dependent bin
//! selection) need no special handling.

mod check;
mod tape;
mod tensor;

pub use check::gradient_check;
pub use tape::{Axis, CustomOp, Tape, Var};
pub use tensor::Tensor;
