//! Minimal reverse-mode differentiation over dense `f64` tensors.

mod gemm;
mod gradcheck;
mod graph;
mod param;
mod tensor;

pub use gradcheck::{
    gradcheck, gradcheck_params, GradcheckReport, ParamCheck, ParamGradcheckReport, Parametrized, DEFAULT_EPS,
};
pub use graph::{resize_bilinear, stable_sigmoid, ConvSpec, Gradients, Graph, Var};
pub use param::{GradBuffer, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
