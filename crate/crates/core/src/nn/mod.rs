//! Network layers and the optimizer.

mod adam;
mod layers;
mod params;

pub use adam::{Adam, AdamConfig};
pub use layers::{
    he_init, AttentionConfig, BatchNorm, FeedForward, MlpBnRelu, Mode, MultiHeadAttention, SharedMlp,
};
pub use params::{Buffer, BufferId, Param, ParamStore};
