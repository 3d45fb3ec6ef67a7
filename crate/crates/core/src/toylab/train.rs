use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::Target;
use crate::layers::Mode;
use crate::model::{FlatteNet, Formulation};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::toylab::decode::decode_keypoints;
use crate::toylab::metrics::{miou, pckh};
use crate::toylab::optim::{OptimConfig, Optimizer};
use crate::toylab::task::{gen_task, grid_to_image, SyntheticTask, TaskKind};

/// Evaluation batches come from this stream index onward, disjoint from training.
pub const EVAL_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    #[serde(default = "unfolded")]
    pub formulation: Formulation,
    /// `Some(k)`: cycle over a fixed set of `k` batches. `None`: a fresh batch every step.
    #[serde(default)]
    pub dataset_batches: Option<u64>,
    #[serde(default = "eval_size")]
    pub eval_size: usize,
}

fn unfolded() -> Formulation {
    Formulation::Unfolded
}
fn eval_size() -> usize {
    16
}

impl TrainOptions {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// PCKh@0.5 as a fraction (keypoints) or mIoU (segmentation) on the evaluation batch.
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Loss of the very first training batch, before any update.
    pub initial_loss: f64,
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    pub fn final_metric(&self) -> Option<f64> {
        self.records.last().map(|r| r.metric)
    }

    /// One JSON object per epoch, newline-terminated.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalResult {
    pub loss: f64,
    pub metric: f64,
}

/// Checks that the model's prediction grid and channel count fit the task.
pub fn check_compatible<T: Scalar>(model: &FlatteNet<T>, task: &SyntheticTask) -> Result<()> {
    task.validate()?;
    if model.classes() != task.channels() {
        return Err(Error::Config(format!(
            "model predicts {} channels, task needs {}",
            model.classes(),
            task.channels()
        )));
    }
    let feature_side = match &model.backbone {
        Some(b) => b.spec.feature_side(task.image_size)?,
        None => task.image_size,
    };
    model.config().check_geometry(feature_side, task.grid_side())
}

pub fn train<T: Scalar>(model: &mut FlatteNet<T>, task: &SyntheticTask, opts: &TrainOptions) -> Result<History> {
    train_with(model, task, opts, |_| {})
}

/// [`train`], calling `on_epoch` after every epoch.
pub fn train_with<T: Scalar>(
    model: &mut FlatteNet<T>,
    task: &SyntheticTask,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    check_compatible(model, task)?;
    if opts.batch_size == 0 || opts.steps_per_epoch == 0 {
        return Err(Error::Config("batch size and steps per epoch must be positive".into()));
    }
    let mut opt = Optimizer::<T>::new(opts.optim)?;
    let mut initial_loss = None;
    let mut records = Vec::with_capacity(opts.epochs);
    let mut step = 0usize;
    model.set_mode(Mode::Train);
    for epoch in 1..=opts.epochs {
        let mut sum = 0.0;
        let mut lr = opt.lr();
        for _ in 0..opts.steps_per_epoch {
            let index = match opts.dataset_batches {
                Some(k) => step as u64 % k.max(1),
                None => step as u64,
            };
            let batch = gen_task::<T>(task, opts.batch_size, index)?;
            let tape = Tape::new();
            let x = tape.constant(batch.images.clone());
            let loss = model.loss(&tape, x, &batch.grid_target()?, opts.formulation)?;
            let value = tape.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss {value} at epoch {epoch}, step {step} (lr {lr})"
                )));
            }
            initial_loss.get_or_insert(value);
            sum += value;
            model.store.zero_grad();
            tape.backward(loss, &mut model.store)?;
            lr = opt.step(&mut model.store)?;
            step += 1;
        }
        let metric = evaluate(model, task, opts.eval_size)?.metric;
        let record = EpochRecord {
            epoch,
            step,
            lr,
            loss: sum / opts.steps_per_epoch as f64,
            metric,
        };
        on_epoch(&record);
        records.push(record);
    }
    Ok(History {
        initial_loss: initial_loss.unwrap_or(f64::NAN),
        records,
    })
}

/// Loss and task metric on the evaluation batch, batch norms in eval mode.
pub fn evaluate<T: Scalar>(model: &mut FlatteNet<T>, task: &SyntheticTask, size: usize) -> Result<EvalResult> {
    let batch = gen_task::<T>(task, size.max(1), EVAL_STREAM)?;
    let modes: Vec<Mode> = model.batch_norms().iter().map(|b| b.state.mode).collect();
    model.set_mode(Mode::Eval);
    let result = (|| {
        let tape = Tape::new();
        let x = tape.constant(batch.images.clone());
        let y = model.forward_unfolded(&tape, x)?;
        let grid = batch.grid_target()?;
        let loss = match &grid {
            Target::Continuous(t) => tape.mse(y, t)?,
            Target::Discrete(l) => tape.softmax_ce(y, l, model.classes(), 1)?,
        };
        let loss = tape.value(loss).item().as_f64();
        let pred = tape.value(y).clone();
        let metric = match task.kind {
            TaskKind::Keypoints => keypoint_pckh(&pred, &batch.keypoints, task)?,
            TaskKind::Segmentation => {
                let Target::Discrete(labels) = &batch.target else {
                    unreachable!("segmentation batches carry labels")
                };
                let full = crate::layers::bilinear_upsample(&pred, task.stride)?;
                miou(&argmax_labels(&full).into_data(), labels.data(), task.count)?
            }
        };
        Ok(EvalResult { loss, metric })
    })();
    for (bn, m) in model.batch_norms_mut().into_iter().zip(modes) {
        bn.set_mode(m);
    }
    result
}

/// PCKh@0.5 in image pixels of decoded grid heatmaps, as a fraction in [0, 1].
pub fn keypoint_pckh<T: Scalar>(heatmaps: &Tensor<T>, truth: &[Vec<(f64, f64)>], task: &SyntheticTask) -> Result<f64> {
    let decoded = decode_keypoints(heatmaps)?;
    let pred: Vec<(f64, f64)> = decoded
        .iter()
        .flatten()
        .map(|&(y, x)| (grid_to_image(y, task.stride), grid_to_image(x, task.stride)))
        .collect();
    let truth: Vec<(f64, f64)> = truth.iter().flatten().copied().collect();
    Ok(pckh(&pred, &truth, task.head_len(), 0.5)? / 100.0)
}

/// Per-pixel argmax over channels; lowest channel wins ties.
pub fn argmax_labels<T: Scalar>(scores: &Tensor<T>) -> Tensor<u32> {
    let d = scores.dims();
    let plane = d.plane();
    let mut out = vec![0u32; d.n * plane];
    for n in 0..d.n {
        for i in 0..plane {
            let mut best = 0;
            for c in 1..d.c {
                if scores.plane(n, c)[i] > scores.plane(n, best)[i] {
                    best = c;
                }
            }
            out[n * plane + i] = best as u32;
        }
    }
    Tensor::from_vec((d.n, 1, d.h, d.w), out).expect("argmax dims")
}
