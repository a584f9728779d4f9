//! Parametric layers on top of the autograd tape.

pub mod backbone;
pub mod layers;
pub mod params;

pub use backbone::{Backbone, BackboneSpec};
pub use layers::{AttentionOutput, EncoderBlock, LayerNorm, Linear, MultiHeadSelfAttention, NormPlacement};
pub use params::{Bound, Init, Param, ParamGroup, ParamId, ParamStore};
