//! Neural-network building blocks on top of candle tensors.

mod adam;
mod layers;
pub mod ops;
mod params;

pub use adam::{accumulate, clip_global_norm, global_norm, Adam, AdamConfig, Grads};
pub use layers::{
    power_iteration, sigma_estimate, spectral_normalize, BatchNorm, CondBatchNorm, Conv2d, ConvT2d,
    Embedding, LayerNorm, Linear, SnState, SN_EPS,
};
pub use params::{group_of, normal, orthogonal, uniform, unit_vector, Mode, ParamStore};
