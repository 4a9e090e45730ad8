//! Differentiable neural-network operators.

mod activation;
mod attention;
mod conv;
mod dropout;
mod linear;
mod norm;
mod params;
mod pool;
mod shift;
mod softmax;

pub use activation::{mish, mish_grad_scalar, mish_scalar, sigmoid, softplus};
pub use attention::{multi_head_attention, AttentionVars};
pub use conv::{conv2d, dwconv, ConvGeometry};
pub use dropout::{dropout, Mode};
pub use linear::{channel_linear, linear};
pub use norm::layernorm;
pub use params::{Bound, ConvParams, LayerNormParams, LinearParams, LinearVars, ParamId, ParamStore};
pub use pool::{maxpool2, upsample2};
pub use shift::{cyclic_shift, group_offsets, ShiftAxis};
pub use softmax::softmax;
