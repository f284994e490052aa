//! Dense tensors and the small set of differentiable kernels the extractor
//! is built from.

pub mod ops;
mod tensor;
pub mod vjp;

pub use ops::{
    bilinear_sample, layer_norm, linear, pointwise_linear, relu, softmax_spatial, LayerNormParams,
    LinearGrads, LinearParams,
};
pub use tensor::Tensor;
pub use vjp::{check_vjp, DiffOp, GradCheckConfig, VjpRecord, VjpReport};
