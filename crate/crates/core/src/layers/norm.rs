//! Batch normalization with running statistics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Dims, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer. The affine `γ`/`β` live in the
/// parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T: Scalar = f64> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
    pub mode: Mode,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::from_f64_lossy(BN_EPS),
            momentum: T::from_f64_lossy(BN_MOMENTUM),
            mode: Mode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Values saved by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T: Scalar> {
    pub(crate) normalized: Tensor<T>,
    pub(crate) inv_std: Vec<T>,
    pub(crate) mode: Mode,
}

fn check_affine<T: Scalar>(x: Dims, gamma: &Tensor<T>, beta: &Tensor<T>, state: &BatchNormState<T>) -> Result<()> {
    let expect = Dims::new(1, x.c, 1, 1);
    if gamma.dims() != expect || beta.dims() != expect || state.channels() != x.c {
        return shape_err(
            "batch_norm",
            format!("input {x} with gamma {} beta {} stats {}", gamma.dims(), beta.dims(), state.channels()),
        );
    }
    Ok(())
}

pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BatchNormState<T>,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let d = x.dims();
    check_affine(d, gamma, beta, state)?;
    let m = d.n * d.plane();
    if state.mode == Mode::Train && m < 2 {
        return invalid("batch_norm", format!("train mode needs n*h*w >= 2 per channel, got {m}"));
    }
    let mt = T::from_usize(m).unwrap();
    let mut normalized = Tensor::zeros(d);
    let mut out = Tensor::zeros(d);
    let mut inv_std = vec![T::zero(); d.c];
    for c in 0..d.c {
        let (mean, var) = match state.mode {
            Mode::Train => {
                let mut sum = T::zero();
                for n in 0..d.n {
                    sum = sum + x.plane(n, c).iter().copied().sum::<T>();
                }
                let mean = sum / mt;
                let mut sq = T::zero();
                for n in 0..d.n {
                    sq = sq + x.plane(n, c).iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                }
                let var = sq / mt;
                let unbiased = sq / T::from_usize(m - 1).unwrap();
                let mom = state.momentum;
                state.running_mean[c] = (T::one() - mom) * state.running_mean[c] + mom * mean;
                state.running_var[c] = (T::one() - mom) * state.running_var[c] + mom * unbiased;
                (mean, var)
            }
            Mode::Eval => (state.running_mean[c], state.running_var[c]),
        };
        let istd = T::one() / (var + state.eps).sqrt();
        inv_std[c] = istd;
        let (g, b) = (gamma.data()[c], beta.data()[c]);
        for n in 0..d.n {
            let off = d.offset(n, c, 0, 0);
            for i in off..off + d.plane() {
                let xh = (x.data()[i] - mean) * istd;
                normalized.data_mut()[i] = xh;
                out.data_mut()[i] = g * xh + b;
            }
        }
    }
    Ok((
        out,
        BnCache {
            normalized,
            inv_std,
            mode: state.mode,
        },
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batch_norm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BnCache<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = grad_out.dims();
    let m = T::from_usize(d.n * d.plane()).unwrap();
    let mut gx = Tensor::zeros(d);
    let mut gg = Tensor::zeros(Dims::new(1, d.c, 1, 1));
    let mut gb = Tensor::zeros(Dims::new(1, d.c, 1, 1));
    for c in 0..d.c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for n in 0..d.n {
            let off = d.offset(n, c, 0, 0);
            for i in off..off + d.plane() {
                let dy = grad_out.data()[i];
                sum_dy = sum_dy + dy;
                sum_dy_xh = sum_dy_xh + dy * cache.normalized.data()[i];
            }
        }
        gg.data_mut()[c] = sum_dy_xh;
        gb.data_mut()[c] = sum_dy;
        let scale = gamma.data()[c] * cache.inv_std[c];
        for n in 0..d.n {
            let off = d.offset(n, c, 0, 0);
            for i in off..off + d.plane() {
                let dy = grad_out.data()[i];
                gx.data_mut()[i] = match cache.mode {
                    Mode::Train => {
                        scale * (dy - sum_dy / m - cache.normalized.data()[i] * sum_dy_xh / m)
                    }
                    Mode::Eval => scale * dy,
                };
            }
        }
    }
    (gx, gg, gb)
}
