//! Dual convolutional network with attention for blind image denoising.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: NCHW tensors and a reverse-mode autodiff tape.
//! - [`nn`]: convolution, pooling, normalisation and activation layers.
//! - [`model`]: the noise estimator, attention module and dual-branch denoiser.
//! - [`loss`]: MSE and Charbonnier/edge/total-variation objectives.
//! - [`data`]: image I/O, noise synthesis, patches, augmentation, manifests.
//! - [`train`]: Adam, learning-rate schedules, the training loop, checkpoints.
//! - [`metrics`]: PSNR/SSIM, complexity counting, receptive fields, benchmarks.

pub mod data;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod probe;
pub mod tensor;
pub mod train;

mod error;

pub use error::{CheckpointError, Error, Result};
pub use tensor::{Element, Shape, Tape, Tensor, Var};
