//! Differentiable computation substrate: tensors on a tape, convolution
//! kernels, parameters, Adam and a finite-difference checker.

mod adam;
mod fdcheck;
mod graph;
pub mod kernels;
mod param;

pub use adam::{AdamState, DEFAULT_LEARNING_RATE};
pub use fdcheck::{finite_diff_check, finite_diff_check_params, relative_error, FdOptions, FdReport};
pub use graph::{Gradients, Graph, Var};
pub use kernels::{MaskType, Padding};
pub use param::{ParamId, ParamKind, ParamStore, Parameter};
