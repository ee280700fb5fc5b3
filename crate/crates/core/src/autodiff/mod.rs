//! Reverse-mode automatic differentiation and the momentum optimizer.

mod graph;
mod optim;
mod tensor;

pub use graph::{Graph, PrimitiveFault, Var, LOG_CLAMP};
pub(crate) use graph::{log_sum_exp, softmax_in_place};
pub use optim::{sgd_step, Param, ParamSet};
pub use tensor::{argmax, Tensor};
