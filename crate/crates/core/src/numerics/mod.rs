//! Dense matrices, a gradient tape, and the optimizer the detector trains with.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, RELATIVE_ERROR_FLOOR};
pub use params::{AdamConfig, Param, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{activation, softmax_rows, Activation, Tensor2D, SIGMOID_CLAMP};
