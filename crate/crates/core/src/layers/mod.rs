//! Convolution, normalization, activation, resampling and loss primitives.
//!
//! Every op here is a pure function over tensors with an explicit backward
//! counterpart; [`crate::tape::Tape`] composes them.

pub mod activation;
pub mod conv;
pub mod loss;
pub mod norm;
pub mod upsample;

pub use activation::{prelu, relu};
pub use conv::{conv2d, ConvSpec};
pub use loss::{mse_loss, pixel_softmax_ce};
pub use norm::{batch_norm, BatchNormState, Mode};
pub use upsample::bilinear_upsample;
