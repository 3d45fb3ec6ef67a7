//! Seeded finite-difference cases for every differentiable op, three shapes each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, rel_err, GradCheckReport, InputReport};
use crate::error::{invalid, Result};
use crate::head::{FlattenConfig, Target};
use crate::layers::{BatchNormState, ConvSpec, Mode};
use crate::model::{FlatteNet, Formulation};
use crate::shuffle::{RearrangeKind, RearrangeSpec, Rearrangement};
use crate::tape::Tape;
use crate::tensor::{Dims, Tensor};

pub const OPS: &[&str] = &[
    "identity",
    "conv2d",
    "group_conv2d",
    "depthwise_conv2d",
    "batch_norm_train",
    "batch_norm_eval",
    "relu",
    "prelu",
    "channel_shuffle",
    "permute_channels",
    "pixel_shuffle",
    "pixel_unshuffle",
    "rearrange",
    "reshape",
    "bilinear_upsample",
    "add",
    "mse",
    "softmax_ce",
    "flattening_head",
    "flattenet_folded",
];

fn rand(d: impl Into<Dims>, seed: u64) -> Tensor<f64> {
    Tensor::uniform(d, 1.0, seed)
}

/// Pushes every entry at least `margin` away from zero.
fn off_kink(t: Tensor<f64>, margin: f64) -> Tensor<f64> {
    t.map(|v| if v >= 0.0 { v + margin } else { v - margin })
}

fn labels(d: Dims, classes: usize, seed: u64) -> Tensor<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(d, (0..d.numel()).map(|_| rng.gen_range(0..classes as u32)).collect()).unwrap()
}

fn conv_case(name: &str, spec: ConvSpec, input: Dims, seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut inputs = vec![rand(input, seed), rand(spec.weight_dims(), seed + 1)];
    if spec.bias {
        inputs.push(rand((1, spec.c_out, 1, 1), seed + 2));
    }
    grad_check(
        name,
        move |t: &Tape<f64>, v| t.conv2d(v[0], v[1], v.get(2).copied(), &spec),
        &inputs,
        eps,
        tol,
    )
}

fn bn_case(name: &str, d: Dims, mode: Mode, seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let c = d.c;
    let inputs = [rand(d, seed), rand((1, c, 1, 1), seed + 1), rand((1, c, 1, 1), seed + 2)];
    let mean: Vec<f64> = rand((1, c, 1, 1), seed + 3).into_data();
    let var: Vec<f64> = rand((1, c, 1, 1), seed + 4).into_data().into_iter().map(|v| v.abs() + 0.5).collect();
    grad_check(
        name,
        move |t: &Tape<f64>, v| {
            let mut state = BatchNormState::new(c);
            state.mode = mode;
            state.running_mean = mean.clone();
            state.running_var = var.clone();
            t.batch_norm(v[0], v[1], v[2], &mut state)
        },
        &inputs,
        eps,
        tol,
    )
}

fn tiny_config(c_in: usize, g: usize, s: usize, s2: usize, classes: usize) -> FlattenConfig {
    let text = format!(
        r#"{{"name":"tiny","c_in":{c_in},"layers":[{{"k":3,"s":{s},"g1":{g},"g2":{g},"g3":{g}}}],"s2":{s2},"predictor":{{"classes":{classes},"mode":"affine-after-R"}}}}"#
    );
    FlattenConfig::from_json(&text).expect("tiny config")
}

fn model_case(name: &str, shape: usize, form: Formulation, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let (c_in, g, s, s2, classes, side) = [(4, 2, 1, 2, 2, 2), (8, 2, 2, 2, 3, 4), (9, 3, 1, 3, 2, 2)][shape];
    let cfg = tiny_config(c_in, g, s, s2, classes);
    let seed = 100 + shape as u64;
    let mut model = FlatteNet::<f64>::new(&cfg, None, seed)?;
    // zero-initialised biases would leave their gradients unexercised
    for p in model.store.iter_mut() {
        if p.name.ends_with(".bias") || p.name.ends_with(".beta") {
            p.value = rand(p.value.dims(), seed ^ 0xb1a5);
        }
    }
    let x = rand((2, c_in, side, side), seed + 1);
    let grid = cfg.output_side(side);
    let target = if shape == 1 {
        Target::Discrete(labels(Dims::new(2, 1, grid, grid), classes, seed + 2))
    } else {
        Target::Continuous(rand((2, classes, grid, grid), seed + 2))
    };
    model_grad_check(name, &model, &x, &target, form, eps, tol)
}

/// Finite differences over every parameter of `model` for its training loss.
/// Batch norms run in train mode.
pub fn model_grad_check(
    name: &str,
    model: &FlatteNet<f64>,
    x: &Tensor<f64>,
    grid_target: &Target<f64>,
    form: Formulation,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let loss = |m: &FlatteNet<f64>, grads: bool| -> Result<(f64, FlatteNet<f64>)> {
        let mut m = m.clone();
        m.set_mode(Mode::Train);
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let l = m.loss(&tape, xv, grid_target, form)?;
        let v = tape.value(l).item();
        if grads {
            m.store.zero_grad();
            tape.backward(l, &mut m.store)?;
        }
        Ok((v, m))
    };
    let (_, analytic) = loss(model, true)?;
    let mut probe = model.clone();
    let mut inputs = Vec::new();
    for (idx, (_, p)) in analytic.store.iter().enumerate() {
        let mut rep = InputReport {
            index: idx,
            max_rel_err: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for coord in 0..p.numel() {
            let id = crate::param::ParamId(idx);
            let base = probe.store.value(id).data()[coord];
            probe.store.get_mut(id).value.data_mut()[coord] = base + eps;
            let plus = loss(&probe, false)?.0;
            probe.store.get_mut(id).value.data_mut()[coord] = base - eps;
            let minus = loss(&probe, false)?.0;
            probe.store.get_mut(id).value.data_mut()[coord] = base;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = p.grad.data()[coord];
            let e = rel_err(a, numeric);
            if e > rep.max_rel_err {
                rep = InputReport {
                    index: idx,
                    max_rel_err: e,
                    worst_coord: coord,
                    analytic: a,
                    numeric,
                };
            }
        }
        inputs.push(rep);
    }
    let max_rel_err = inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        name: name.to_string(),
        eps,
        tol,
        max_rel_err,
        passed: max_rel_err <= tol,
        inputs,
    })
}

/// One case of `op`; `shape` selects one of three seeded geometries.
pub fn run_case(op: &str, shape: usize, eps: f64, tol: f64) -> Result<GradCheckReport> {
    if shape >= 3 {
        return invalid("gradcheck", format!("shape index {shape} outside 0..3"));
    }
    let seed = 11 * (shape as u64 + 1);
    let name = format!("{op}#{shape}");
    let name = name.as_str();
    let i = shape;
    match op {
        "identity" => {
            let d = [(1, 2, 3, 3), (2, 3, 2, 4), (1, 1, 5, 1)][i];
            grad_check(name, |_: &Tape<f64>, v| Ok(v[0]), &[rand(d, seed)], eps, tol)
        }
        "conv2d" => {
            let (spec, d) = [
                (ConvSpec::new(2, 3, 3), Dims::new(2, 2, 5, 5)),
                (ConvSpec::new(3, 2, 3).stride(2).with_bias(true), Dims::new(1, 3, 6, 7)),
                (ConvSpec::new(2, 4, 1), Dims::new(2, 2, 3, 3)),
            ][i];
            conv_case(name, spec, d, seed, eps, tol)
        }
        "group_conv2d" => {
            let (spec, d) = [
                (ConvSpec::pointwise(4, 6, 2), Dims::new(2, 4, 3, 3)),
                (ConvSpec::new(6, 6, 3).groups(3).stride(2), Dims::new(1, 6, 5, 5)),
                (ConvSpec::new(4, 8, 3).groups(4).with_bias(true), Dims::new(2, 4, 4, 3)),
            ][i];
            conv_case(name, spec, d, seed, eps, tol)
        }
        "depthwise_conv2d" => {
            let (spec, d) = [
                (ConvSpec::depthwise(4, 3), Dims::new(1, 4, 6, 6)),
                (ConvSpec::depthwise(3, 3).stride(2), Dims::new(2, 3, 5, 5)),
                (ConvSpec::depthwise(2, 5), Dims::new(1, 2, 4, 6)),
            ][i];
            conv_case(name, spec, d, seed, eps, tol)
        }
        "batch_norm_train" => {
            let d = [(4, 3, 2, 2), (2, 2, 3, 3), (3, 4, 1, 2)][i];
            bn_case(name, d.into(), Mode::Train, seed, eps, tol)
        }
        "batch_norm_eval" => {
            let d = [(2, 3, 2, 2), (1, 2, 3, 3), (3, 4, 1, 2)][i];
            bn_case(name, d.into(), Mode::Eval, seed, eps, tol)
        }
        "relu" => {
            let d = [(1, 3, 4, 4), (2, 2, 3, 3), (1, 5, 2, 1)][i];
            grad_check(name, |t: &Tape<f64>, v| t.relu(v[0]), &[off_kink(rand(d, seed), 100.0 * eps)], eps, tol)
        }
        "prelu" => {
            let d: Dims = [(1, 3, 4, 4), (2, 2, 3, 3), (1, 5, 2, 1)][i].into();
            let x = off_kink(rand(d, seed), 100.0 * eps);
            let slope = rand((1, d.c, 1, 1), seed + 1);
            grad_check(name, |t: &Tape<f64>, v| t.prelu(v[0], v[1]), &[x, slope], eps, tol)
        }
        "channel_shuffle" => {
            let (d, g) = [((1, 6, 2, 2), 2), ((2, 6, 1, 3), 3), ((1, 8, 2, 1), 4)][i];
            grad_check(name, move |t: &Tape<f64>, v| t.channel_shuffle(v[0], g), &[rand(d, seed)], eps, tol)
        }
        "permute_channels" => {
            let sources: &[usize] = [&[2, 0, 1][..], &[3, 1, 0, 2][..], &[1, 0][..]][i];
            let d = (2, sources.len(), 2, 3);
            grad_check(name, move |t: &Tape<f64>, v| t.permute_channels(v[0], sources), &[rand(d, seed)], eps, tol)
        }
        "pixel_shuffle" => {
            let (d, r) = [((1, 4, 2, 3), 2), ((2, 18, 2, 2), 3), ((1, 8, 1, 2), 2)][i];
            grad_check(name, move |t: &Tape<f64>, v| t.pixel_shuffle(v[0], r), &[rand(d, seed)], eps, tol)
        }
        "pixel_unshuffle" => {
            let (d, r) = [((1, 1, 4, 6), 2), ((2, 2, 6, 3), 3), ((1, 3, 2, 4), 2)][i];
            grad_check(name, move |t: &Tape<f64>, v| t.pixel_unshuffle(v[0], r), &[rand(d, seed)], eps, tol)
        }
        "rearrange" => {
            let kind = [
                RearrangeKind::ChannelShufflePixelShuffle,
                RearrangeKind::PixelShuffleOnly,
                RearrangeKind::RandPermPixelShuffle,
            ][i];
            let (s2, ct) = [(2, 3), (3, 2), (2, 2)][i];
            let r = Rearrangement::new(RearrangeSpec::new(s2, ct), kind, seed)?;
            let d = (2, s2 * s2 * ct, 2, 2);
            grad_check(name, move |t: &Tape<f64>, v| t.rearrange(v[0], &r), &[rand(d, seed)], eps, tol)
        }
        "reshape" => {
            let (d, to) = [
                (Dims::new(2, 6, 1, 2), Dims::new(4, 3, 1, 2)),
                (Dims::new(1, 4, 3, 3), Dims::new(1, 36, 1, 1)),
                (Dims::new(3, 2, 2, 1), Dims::new(1, 12, 1, 1)),
            ][i];
            grad_check(name, move |t: &Tape<f64>, v| t.reshape(v[0], to), &[rand(d, seed)], eps, tol)
        }
        "bilinear_upsample" => {
            let (d, f) = [((1, 2, 3, 3), 2), ((2, 1, 2, 4), 3), ((1, 3, 1, 2), 4)][i];
            grad_check(name, move |t: &Tape<f64>, v| t.upsample(v[0], f), &[rand(d, seed)], eps, tol)
        }
        "add" => {
            let d = [(1, 2, 3, 3), (2, 3, 2, 1), (1, 1, 4, 4)][i];
            let inputs = [rand(d, seed), rand(d, seed + 1)];
            grad_check(name, |t: &Tape<f64>, v| t.add(v[0], v[1]), &inputs, eps, tol)
        }
        "mse" => {
            let d = [(1, 2, 3, 3), (2, 3, 2, 2), (1, 4, 1, 5)][i];
            let target = rand(d, seed + 1);
            grad_check(name, move |t: &Tape<f64>, v| t.mse(v[0], &target), &[rand(d, seed)], eps, tol)
        }
        "softmax_ce" => {
            let (classes, block, n, side) = [(3, 1, 2, 3), (2, 2, 1, 2), (4, 3, 1, 1)][i];
            let d = Dims::new(n, classes * block * block, side, side);
            let l = labels(Dims::new(n, block * block, side, side), classes, seed + 1);
            grad_check(
                name,
                move |t: &Tape<f64>, v| t.softmax_ce(v[0], &l, classes, block),
                &[rand(d, seed).scale(3.0)],
                eps,
                tol,
            )
        }
        "flattening_head" => model_case(name, i, Formulation::Unfolded, eps, tol),
        "flattenet_folded" => model_case(name, i, Formulation::Folded, eps, tol),
        other => invalid("gradcheck", format!("unknown op {other:?}; known: {}", OPS.join(", "))),
    }
}

/// The three cases of one op.
pub fn run_op(op: &str, eps: f64, tol: f64) -> Result<Vec<GradCheckReport>> {
    (0..3).map(|i| run_case(op, i, eps, tol)).collect()
}

pub fn run_all(eps: f64, tol: f64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for op in OPS {
        out.extend(run_op(op, eps, tol)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{DEFAULT_EPS, DEFAULT_TOL};

    #[test]
    fn unknown_op_rejected() {
        assert!(run_op("softmax", DEFAULT_EPS, DEFAULT_TOL).is_err());
        assert!(run_case("relu", 3, DEFAULT_EPS, DEFAULT_TOL).is_err());
    }

    #[test]
    fn flawed_gradient_is_caught() {
        // x ↦ relu(x) checked at a kink fails
        let x = Tensor::from_vec((1, 1, 1, 2), vec![0.0, 1.0]).unwrap();
        let r = grad_check("relu@0", |t: &Tape<f64>, v| t.relu(v[0]), &[x], DEFAULT_EPS, DEFAULT_TOL).unwrap();
        assert!(!r.passed);
    }
}

