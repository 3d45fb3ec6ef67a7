//! Dense pixelwise prediction with a Flattening Module head.
//!
//! A fully convolutional backbone produces coarse feature maps; a stack of
//! depthwise separable group convolution (DWSGConv) layers predicts a grid
//! of per-pixel descriptors for every coarse cell, and a fixed bijective
//! rearrangement moves that grid from channels to space. Because the
//! rearrangement is a permutation, the same model can be trained against
//! folded targets with a plain per-cell predictor.

pub mod complexity;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod io;
pub mod layers;
pub mod model;
pub mod nn;
pub mod param;
pub mod shuffle;
pub mod tape;
pub mod tensor;
pub mod toylab;

pub use error::{Error, Result};
pub use model::{FlatteNet, Formulation};
pub use param::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Dims, Scalar, Tensor};
