//! Layer primitives with forward values and backward rules.

mod activation;
mod conv;
mod filters;
mod norm;
mod resample;

pub use activation::{activation, prelu, relu, sigmoid, tanh, Activation, PRELU_INIT};
pub use conv::{conv2d, ConvGeometry};
pub use filters::{channel_pool, laplacian, spatial_gap, spatial_gradients};
pub use norm::{batch_norm, BatchNormConfig, NormMode, BN_EPS, BN_MOMENTUM};
pub use resample::{bilinear_upsample2, crop_center, max_pool2};
