//! Minimal neural-network substrate: tensors, a reverse-mode tape, layers,
//! multi-head cross-attention, Adam and gradient checking. Everything is
//! generic over [`Real`](crate::scalar::Real).

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use adam::Adam;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, Segments, Var};
pub use layers::{
    mlp_forward, positional_encoding, softmax, AttentionConfig, AttentionOutput, CrossAttention, LayerNorm, Linear,
    Mlp,
};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor2;
