//! The Flattening Module head: DWSGConv layers, the rearrangement, the
//! pixelwise predictor in both formulations, and target folding.

pub mod config;
pub mod dwsg;
pub mod equivalence;
pub mod fold;
pub mod module;

pub use config::{shipped, DwsgConvSpec, FlattenConfig, LayerConfig, PredictorConfig, PredictorMode};
pub use dwsg::DwsgLayer;
pub use equivalence::{end_to_end_loss, EquivalenceReport};
pub use fold::{fold_targets, Target, TargetKind};
pub use module::{FlatteningModule, Predictor};
