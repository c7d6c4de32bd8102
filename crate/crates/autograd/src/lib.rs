//! Minimal reverse-mode automatic differentiation for the vision-language
//! model: dense row-major `f64` matrices, a recording tape, and the handful of
//! fused kernels (layer norm, multi-head attention, soft-target cross
//! entropy) the model needs.

pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
