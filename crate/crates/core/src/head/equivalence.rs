//! Unfolded (A) vs folded (B) pipelines on one model: losses, outputs and
//! parameter gradients must agree.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{invalid, shape_err, Result};
use crate::head::config::FlattenConfig;
use crate::head::fold::{Target, TargetKind};
use crate::model::{FlatteNet, Formulation};
use crate::tape::Tape;
use crate::tensor::{Dims, Scalar, Tensor};

pub const LOSS_TOL: f64 = 1e-12;
pub const GRAD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub name: String,
    pub target: TargetKind,
    pub loss_a: f64,
    pub loss_b: f64,
    pub loss_diff: f64,
    /// max |R(P) − Y_p̃|
    pub output_diff: f64,
    /// max over all parameters of |∂ℓ_A/∂θ − ∂ℓ_B/∂θ|
    pub grad_diff: f64,
    pub passed: bool,
}

/// Runs both pipelines on clones of `model` against the full-resolution
/// target `target` (`s1` times the prediction grid) and compares them.
pub fn end_to_end_loss<T: Scalar>(
    model: &FlatteNet<T>,
    x: &Tensor<T>,
    target: &Target<T>,
    s1: usize,
) -> Result<EquivalenceReport> {
    let grid = target.downsample(s1)?;

    let mut a = model.clone();
    a.store.zero_grad();
    let tape_a = Tape::new();
    let xa = tape_a.leaf(x.clone());
    let ya = a.forward_unfolded(&tape_a, xa)?;
    let la = a.loss(&tape_a, xa, &grid, Formulation::Unfolded)?;
    tape_a.backward(la, &mut a.store)?;

    let mut b = model.clone();
    b.store.zero_grad();
    let tape_b = Tape::new();
    let xb = tape_b.leaf(x.clone());
    let pb = b.forward_folded(&tape_b, xb)?;
    let lb = b.loss(&tape_b, xb, &grid, Formulation::Folded)?;
    tape_b.backward(lb, &mut b.store)?;

    let unfolded_b = b.output_rearrangement.apply(&tape_b.value(pb))?;
    let output_diff = diff(&tape_a.value(ya), &unfolded_b)?;

    let mut grad_diff = 0.0f64;
    for ((_, pa), (_, pb)) in a.store.iter().zip(b.store.iter()) {
        grad_diff = grad_diff.max(diff(&pa.grad, &pb.grad)?);
    }

    let loss_a = tape_a.value(la).item().as_f64();
    let loss_b = tape_b.value(lb).item().as_f64();
    let loss_diff = (loss_a - loss_b).abs();
    Ok(EquivalenceReport {
        name: model.config().name.clone(),
        target: target.kind(),
        loss_a,
        loss_b,
        loss_diff,
        output_diff,
        grad_diff,
        passed: loss_diff <= LOSS_TOL && output_diff <= LOSS_TOL && grad_diff <= GRAD_TOL,
    })
}

fn diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    match a.max_abs_diff(b) {
        Some(d) => Ok(d.as_f64()),
        None => shape_err("end_to_end_loss", format!("{} vs {}", a.dims(), b.dims())),
    }
}

/// Seeded head-only check of `config`: random features at twice the
/// head's total stride, random targets of the given kind, `s1 = 2`.
pub fn check_config(config: &FlattenConfig, kind: TargetKind, seed: u64) -> Result<EquivalenceReport> {
    if config.s2 == 0 {
        return invalid("check_config", "s2 must be positive");
    }
    let model = FlatteNet::<f64>::new(config, None, seed)?;
    let side = 2 * config.total_stride();
    let x = Tensor::uniform((2, config.c_in, side, side), 1.0, seed ^ 0x5eed);
    let s1 = 2;
    let full = s1 * config.output_side(side);
    let classes = config.predictor.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let target = match kind {
        TargetKind::Continuous => {
            let d = Dims::new(2, classes, full, full);
            Target::Continuous(Tensor::from_vec(d, (0..d.numel()).map(|_| rng.gen::<f64>()).collect())?)
        }
        TargetKind::Discrete => {
            let d = Dims::new(2, 1, full, full);
            Target::Discrete(Tensor::from_vec(
                d,
                (0..d.numel()).map(|_| rng.gen_range(0..classes as u32)).collect(),
            )?)
        }
    };
    end_to_end_loss(&model, &x, &target, s1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::shipped;

    #[test]
    fn table1_both_target_kinds() {
        let cfg = shipped::load("table1").unwrap();
        for kind in [TargetKind::Continuous, TargetKind::Discrete] {
            let r = check_config(&cfg, kind, 3).unwrap();
            assert!(r.passed, "{r:?}");
            assert!(r.loss_a > 0.0);
        }
    }

    #[test]
    fn zero_predictor_zero_targets_give_zero_loss() {
        let cfg = shipped::load("table1").unwrap();
        let mut model = FlatteNet::<f64>::new(&cfg, None, 0).unwrap();
        for id in [Some(model.predictor.linear.weight), model.predictor.linear.bias] {
            let p = model.store.get_mut(id.unwrap());
            p.value = Tensor::zeros(p.value.dims());
        }
        let x = Tensor::uniform((2, 2048, 2, 2), 1.0, 1);
        let y = Target::Continuous(Tensor::zeros((2, 16, 16, 16)));
        let r = end_to_end_loss(&model, &x, &y, 1).unwrap();
        assert_eq!((r.loss_a, r.loss_b), (0.0, 0.0));
    }
}
