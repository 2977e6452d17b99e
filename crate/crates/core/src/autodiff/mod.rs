//! Dense-tensor reverse-mode automatic differentiation, just large enough to
//! train and ascend a small causal transformer.

pub mod kernels;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{Direction, OptimizerState};
pub use tape::{Reduction, Tape, ValueId};
pub use tensor::{argmax, softmax_slice, Tensor};
