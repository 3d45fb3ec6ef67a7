//! Mean-reduced losses. Each returns the scalar loss and its gradient with
//! respect to the prediction.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Dims, Scalar, Tensor};

pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if pred.dims() != target.dims() {
        return shape_err("mse_loss", format!("pred {} vs target {}", pred.dims(), target.dims()));
    }
    let count = T::from_usize(pred.numel().max(1)).unwrap();
    let mut sum = T::zero();
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let diff = p - t;
            sum = sum + diff * diff;
            (diff + diff) / count
        })
        .collect();
    Ok((sum / count, Tensor::from_vec(pred.dims(), grad)?))
}

/// Per-pixel softmax cross-entropy.
///
/// `pred` has `classes * block_size²` channels laid out as contiguous blocks
/// of `classes` logits; `labels` has one channel per block. With
/// `block_size == 1` this is plain per-pixel cross-entropy.
pub fn pixel_softmax_ce<T: Scalar>(
    pred: &Tensor<T>,
    labels: &Tensor<u32>,
    classes: usize,
    block_size: usize,
) -> Result<(T, Tensor<T>)> {
    if classes == 0 || block_size == 0 {
        return invalid("pixel_softmax_ce", "classes and block_size must be positive");
    }
    let d = pred.dims();
    let blocks = block_size * block_size;
    if d.c != classes * blocks {
        return shape_err("pixel_softmax_ce", format!("{} channels for {classes} classes x {blocks} blocks", d.c));
    }
    let ld = labels.dims();
    if ld != Dims::new(d.n, blocks, d.h, d.w) {
        return shape_err("pixel_softmax_ce", format!("labels {ld} for prediction {d}"));
    }
    if let Some(&bad) = labels.data().iter().find(|&&l| l as usize >= classes) {
        return invalid("pixel_softmax_ce", format!("label {bad} outside [0, {classes})"));
    }
    let sites = d.n * blocks * d.plane();
    let count = T::from_usize(sites.max(1)).unwrap();
    let mut grad = Tensor::zeros(d);
    let mut total = T::zero();
    let mut probs = vec![T::zero(); classes];
    for n in 0..d.n {
        for b in 0..blocks {
            for y in 0..d.h {
                for x in 0..d.w {
                    let idx = |k: usize| d.offset(n, b * classes + k, y, x);
                    let mut max = T::neg_infinity();
                    for k in 0..classes {
                        max = max.max(pred.data()[idx(k)]);
                    }
                    let mut z = T::zero();
                    for (k, p) in probs.iter_mut().enumerate() {
                        *p = (pred.data()[idx(k)] - max).exp();
                        z = z + *p;
                    }
                    let label = labels.at(n, b, y, x) as usize;
                    total = total - ((pred.data()[idx(label)] - max) - z.ln());
                    for (k, p) in probs.iter().enumerate() {
                        let onehot = if k == label { T::one() } else { T::zero() };
                        grad.data_mut()[idx(k)] = (*p / z - onehot) / count;
                    }
                }
            }
        }
    }
    Ok((total / count, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_of_equal_tensors_is_zero() {
        let p = Tensor::<f64>::uniform((2, 3, 4, 4), 1.0, 1);
        let (l, g) = mse_loss(&p, &p).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.sum(), 0.0);
    }

    #[test]
    fn mse_value() {
        let p = Tensor::from_vec((1, 1, 1, 2), vec![1.0, 3.0]).unwrap();
        let t = Tensor::from_vec((1, 1, 1, 2), vec![0.0, 0.0]).unwrap();
        let (l, g) = mse_loss(&p, &t).unwrap();
        assert_eq!(l, 5.0);
        assert_eq!(g.data(), &[1.0, 3.0]);
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let p = Tensor::<f64>::zeros((1, 2, 3, 3));
        let labels = Tensor::from_vec((1, 1, 3, 3), vec![0u32, 1, 0, 1, 1, 0, 0, 0, 1]).unwrap();
        let (l, _) = pixel_softmax_ce(&p, &labels, 2, 1).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let p = Tensor::<f64>::zeros((1, 2, 1, 1));
        let labels = Tensor::from_vec((1, 1, 1, 1), vec![2u32]).unwrap();
        assert!(pixel_softmax_ce(&p, &labels, 2, 1).is_err());
    }

    #[test]
    fn ce_gradient_sums_to_zero_per_site() {
        let p = Tensor::<f64>::uniform((1, 3, 2, 2), 2.0, 5);
        let labels = Tensor::from_vec((1, 1, 2, 2), vec![0u32, 1, 2, 1]).unwrap();
        let (_, g) = pixel_softmax_ce(&p, &labels, 3, 1).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                let s: f64 = (0..3).map(|k| g.at(0, k, y, x)).sum();
                assert!(s.abs() < 1e-15);
            }
        }
    }
}
