//! Parameter storage and differentiable layers.

pub mod layers;
pub mod params;

pub use layers::{
    bilinear_matrix, conv_output_len, resize_bilinear, sigmoid, softmax_last_dim, BatchNorm2d, Conv2d, ConvSpec,
    ConvTranspose2d, LayerNorm, Linear, Mlp, Mode,
};
pub use params::{Init, ParamStore, Scope};
