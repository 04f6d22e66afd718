//! A deliberately small reverse-mode network kernel.
//!
//! Everything here works on dense `f64` buffers. Feature maps are stored
//! channel-major (`channels × sites`), so a 1×1 convolution is a
//! [`Pointwise`] map applied independently at every site.
//!
//! Parameters live in a [`ParamStore`] next to a gradient accumulator of the
//! same shape. Layers read parameters during `forward` and add into the
//! accumulators during `backward`; [`Adam::step`] is the only code path that
//! writes parameter values.

mod adam;
mod checkpoint;
mod error;
mod layers;
mod loss;
mod network;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_params, read_params, save_params, write_params};
pub use error::{NetError, Result};
pub use layers::{
    concat_channels, relu, relu_backward, sigmoid, softmax, softmax_backward, split_channels,
    tile_scalar, Dense, Pointwise,
};
pub use loss::{binary_cross_entropy_with_logits, cross_entropy, squared_error, LOG_FLOOR};
pub use network::{Layer, LayerSpec, Network, Tape};
pub use params::{glorot_bound, Param, ParamId, ParamStore};
pub use tensor::Tensor;
