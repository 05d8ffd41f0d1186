//! Dense tensors with reverse-mode differentiation over the fixed set of
//! operations the encoder uses.

mod gradcheck;
mod graph;
mod registry;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, RELATIVE_ERROR_FLOOR};
pub use graph::{gelu, sigmoid, smooth_l1_mean, Graph, Var};
pub use registry::{ParameterRegistry, Params};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use graph::masked_softmax_rows;
