//! Transformer layers with explicit forward/backward passes.
//!
//! Forward passes always compute on exact values. Whatever a layer needs for
//! its gradient is handed to the [`ActivationStore`], which keeps it exact
//! or compresses it according to the [`CompressionPolicy`]; the backward
//! pass then works from the restored (possibly dequantized) tensors.
//!
//! What each op keeps:
//!
//! | op        | stored                                   | layout        |
//! |-----------|------------------------------------------|---------------|
//! | linear    | input                                    | channel group |
//! | Q·Kᵀ      | Q, K                                     | head-wise     |
//! | softmax   | output probabilities                     | head-wise     |
//! | P·V       | probabilities, V                         | head-wise     |
//! | layernorm | normalized input; row mean and 1/std     | channel group |
//! | GELU      | input                                    | channel group |

mod activation;
mod attention;
mod linear;
mod mlp;
mod norm;
mod policy;
mod store;

pub use activation::{gelu_backward, gelu_forward, softmax_backward, softmax_forward};
pub use attention::{Attention, AttentionCtx};
pub use linear::Linear;
pub use mlp::{Mlp, MlpCtx};
pub use norm::{LayerNorm, LAYERNORM_EPS};
pub use policy::{CompressionPolicy, Granularity, Module, ModuleFlags, OpFlags};
pub use store::{
    ActivationStore, ContextData, LayerContext, Quantizer, QuantizerSnapshot, Saved, StoreMode,
    TensorRole,
};

use crate::tensor::Tensor;

/// Named parameter gradients.
pub type Grads<T> = Vec<(String, Tensor<T>)>;

pub(crate) type ParamsRef<'a, T> = Vec<(String, &'a Tensor<T>)>;
pub(crate) type ParamsMut<'a, T> = Vec<(String, &'a mut Tensor<T>)>;
