//! Differentiable building blocks. Each layer keeps its parameters in a
//! shared [`ParamStore`] and exposes `forward` returning whatever the matching
//! `backward` needs; `backward` accumulates parameter gradients into the store
//! and returns the gradient with respect to its input.

pub mod activation;
pub mod attention;
pub mod gradcheck;
pub mod layer_norm;
pub mod linear;
pub mod params;

pub use activation::{
    gelu, gelu_backward, gelu_derivative, gelu_scalar, log_softmax, sigmoid, sigmoid_backward,
    sigmoid_scalar, softmax, softmax_backward, softmax_rows,
};
pub use attention::{AttentionCache, AttentionConfig, AttentionGrads, CrossAttention};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use layer_norm::{layer_norm, layer_norm_backward, LayerNorm, LayerNormCache};
pub use linear::{linear, linear_backward, Linear};
pub use params::{Param, ParamId, ParamStore};
