//! Desk-scale training: a toy backbone, synthetic tasks, optimizers, the
//! training loop, keypoint decoding and evaluation metrics.

pub mod backbone;
pub mod decode;
pub mod metrics;
pub mod optim;
pub mod protocol;
pub mod task;
pub mod train;

pub use backbone::{ToyBackbone, ToyBackboneSpec};
pub use decode::{decode_keypoints, decode_plane};
pub use metrics::{confusion_matrix, miou, pckh, pckh_auc};
pub use optim::{OptimConfig, OptimKind, Optimizer, Schedule};
pub use protocol::{reference_options, reference_task, train_depth, DepthRun, RunOutcome, DEPTH_RUNS};
pub use task::{gen_task, Batch, SyntheticTask, TaskKind};
pub use train::{evaluate, train, train_with, EpochRecord, EvalResult, History, TrainOptions};

use crate::error::Result;
use crate::head::FlattenConfig;
use crate::model::FlatteNet;
use crate::tensor::Scalar;

/// Stage widths of the narrow backbone used for desk-scale training runs.
pub const NARROW_WIDTHS: [usize; 5] = [16, 32, 64, 128, 256];

/// Narrow five-stage backbone widened by a 1×1 conv to the head's input channels.
pub fn narrow_backbone(head: &FlattenConfig) -> ToyBackboneSpec {
    ToyBackboneSpec {
        widths: NARROW_WIDTHS.to_vec(),
        out_channels: Some(head.c_in),
        ..Default::default()
    }
}

/// Toy backbone + `head` with the predictor resized to the task's channel
/// count. Predictor weights start at zero so initial heatmaps are flat.
pub fn toy_model<T: Scalar>(head: &FlattenConfig, task: &SyntheticTask, backbone: &ToyBackboneSpec, seed: u64) -> Result<FlatteNet<T>> {
    let mut head = head.clone();
    head.predictor.classes = task.channels();
    let mut model = FlatteNet::new(&head, Some(backbone), seed)?;
    train::check_compatible(&model, task)?;
    let w = model.store.get_mut(model.predictor.linear.weight);
    w.value = crate::tensor::Tensor::zeros(w.value.dims());
    Ok(model)
}
