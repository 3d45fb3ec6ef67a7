//! The reference desk-scale keypoint run used for trainability checks.

use serde::Serialize;

use super::{narrow_backbone, toy_model, train_with, EpochRecord, History, OptimConfig, OptimKind, Schedule, SyntheticTask, TrainOptions};
use crate::error::{Error, Result};
use crate::head::shipped;
use crate::model::{FlatteNet, Formulation};
use crate::tensor::Scalar;

/// Total subsampling depth realised by a head stacked on the five-stage toy backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DepthRun {
    pub depth: usize,
    pub head: &'static str,
    pub image_size: usize,
}

pub const DEPTH_RUNS: [DepthRun; 3] = [
    DepthRun {
        depth: 5,
        head: "table1",
        image_size: 64,
    },
    DepthRun {
        depth: 6,
        head: "table11_sub6",
        image_size: 64,
    },
    // two stride-2 layers need a 4×4 feature map
    DepthRun {
        depth: 7,
        head: "table11_sub7",
        image_size: 128,
    },
];

pub fn depth_run(depth: usize) -> Result<DepthRun> {
    DEPTH_RUNS
        .iter()
        .copied()
        .find(|r| r.depth == depth)
        .ok_or_else(|| Error::Config(format!("no reference run for depth {depth} (5, 6, 7)")))
}

pub const REFERENCE_KEYPOINTS: usize = 1;

pub fn reference_task(image_size: usize, seed: u64) -> SyntheticTask {
    SyntheticTask::keypoints(image_size, REFERENCE_KEYPOINTS, seed)
}

/// Adam 1e-3, batch 16, 10 epochs of 20 steps.
pub fn reference_options() -> TrainOptions {
    TrainOptions {
        epochs: 10,
        steps_per_epoch: 20,
        batch_size: 16,
        optim: OptimConfig {
            kind: OptimKind::adam(1e-3),
            schedule: Schedule::Constant,
        },
        formulation: Formulation::Unfolded,
        dataset_batches: None,
        eval_size: 16,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutcome {
    pub run: DepthRun,
    pub history: History,
    /// Final epoch loss over the first batch loss.
    pub loss_ratio: f64,
    /// PCKh@0.5 of the final evaluation, as a fraction.
    pub pckh: f64,
}

/// Builds the model for `run` and trains it with `opts`.
pub fn train_depth<T: Scalar>(
    run: DepthRun,
    seed: u64,
    opts: &TrainOptions,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(FlatteNet<T>, RunOutcome)> {
    let head = shipped::load(run.head).ok_or_else(|| Error::Config(format!("missing shipped config {}", run.head)))?;
    let task = reference_task(run.image_size, seed);
    let mut model = toy_model::<T>(&head, &task, &narrow_backbone(&head), seed)?;
    let history = train_with(&mut model, &task, opts, on_epoch)?;
    let last = history.records.last().ok_or_else(|| Error::Config("no epochs were run".into()))?;
    let outcome = RunOutcome {
        run,
        loss_ratio: last.loss / history.initial_loss,
        pckh: last.metric,
        history,
    };
    Ok((model, outcome))
}
