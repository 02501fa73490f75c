//! Minimal dense building blocks shared by the encoders and the adapter.

mod layers;
mod optim;
mod params;

pub use layers::{gelu, gelu_grad, Attention, Block, BlockCache, LayerNorm, Linear, Mlp, MlpCache};
pub use optim::{AdamW, AdamWConfig};
pub use params::{init_tensor, Grads, Init, ParamId, ParamStore};
