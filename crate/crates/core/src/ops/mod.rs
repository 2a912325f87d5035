//! Tensor-level kernels: forward operators and the hand-written adjoints the
//! tape uses during the backward pass.

pub mod activation;
pub mod broadcast;
pub mod conv;
pub mod matmul;
pub mod norm;
pub mod resample;
pub mod softmax;

pub use activation::{gelu, sigmoid, softplus, squared_relu};
pub use conv::{conv2d, ConvGroups, ConvSpec};
pub use matmul::{bmm, linear};
pub use norm::{layer_norm, LN_EPS};
pub use resample::{adaptive_avg_pool, bilinear_resize, offset_upsample};
pub use softmax::softmax;
