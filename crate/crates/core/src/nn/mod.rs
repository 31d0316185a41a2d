//! Minimal dense layers with hand-written backward passes.

mod layers;
mod params;

pub use layers::{
    dropout_mask, gelu, gelu_grad, Attention, AttnCache, EncoderLayer, LayerCache, LayerNorm, Linear, LnCache, Span,
    LN_EPS,
};
pub use params::{AdamW, ParamId, Params};
