//! Folding full-resolution label maps into the stacked layout the folded
//! predictor emits: downsample by `s1`, then apply `R⁻¹` with `s2`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_divisible, invalid, Result};
use crate::shuffle::Rearrangement;
use crate::tensor::{Dims, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    /// Real-valued maps; downsampled by `s1 × s1` average pooling.
    Continuous,
    /// Class labels; downsampled by taking every `s1`-th pixel (top-left of each cell).
    Discrete,
}

/// A dense supervision signal.
#[derive(Debug, Clone, PartialEq)]
pub enum Target<T: Scalar> {
    /// `(n, C, H, W)` real-valued maps, e.g. keypoint heatmaps.
    Continuous(Tensor<T>),
    /// `(n, 1, H, W)` class indices.
    Discrete(Tensor<u32>),
}

impl<T: Scalar> Target<T> {
    pub fn kind(&self) -> TargetKind {
        match self {
            Target::Continuous(_) => TargetKind::Continuous,
            Target::Discrete(_) => TargetKind::Discrete,
        }
    }

    pub fn dims(&self) -> Dims {
        match self {
            Target::Continuous(t) => t.dims(),
            Target::Discrete(t) => t.dims(),
        }
    }

    pub fn downsample(&self, s1: usize) -> Result<Self> {
        Ok(match self {
            Target::Continuous(t) => Target::Continuous(average_pool(t, s1)?),
            Target::Discrete(t) => Target::Discrete(stride_subsample(t, s1)?),
        })
    }

    /// `R⁻¹` with the standard rearrangement on this target's channel count.
    pub fn fold_grid(&self, s2: usize) -> Result<Self> {
        let c = self.dims().c;
        let r = Rearrangement::standard(s2, c)?;
        Ok(match self {
            Target::Continuous(t) => Target::Continuous(r.inverse(t)?),
            Target::Discrete(t) => Target::Discrete(r.inverse(t)?),
        })
    }

    /// Inverse of [`Target::fold_grid`].
    pub fn unfold_grid(&self, s2: usize) -> Result<Self> {
        let c = self.dims().c / (s2 * s2).max(1);
        let r = Rearrangement::standard(s2, c)?;
        Ok(match self {
            Target::Continuous(t) => Target::Continuous(r.apply(t)?),
            Target::Discrete(t) => Target::Discrete(r.apply(t)?),
        })
    }
}

/// Downsample by `s1` then fold with `R⁻¹` (`s2`), giving `(n, C·s2², H/(s1·s2), W/(s1·s2))`.
pub fn fold_targets<T: Scalar>(target: &Target<T>, s1: usize, s2: usize) -> Result<Target<T>> {
    let d = target.dims();
    if s1 == 0 || s2 == 0 {
        return invalid("fold_targets", "s1 and s2 must be positive");
    }
    ensure_divisible("fold_targets height", d.h, s1 * s2)?;
    ensure_divisible("fold_targets width", d.w, s1 * s2)?;
    target.downsample(s1)?.fold_grid(s2)
}

pub fn average_pool<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let d = x.dims();
    ensure_divisible("average_pool height", d.h, s)?;
    ensure_divisible("average_pool width", d.w, s)?;
    if s == 1 {
        return Ok(x.clone());
    }
    let od = Dims::new(d.n, d.c, d.h / s, d.w / s);
    let scale = T::one() / T::from_usize(s * s).unwrap();
    let mut out = Vec::with_capacity(od.numel());
    for n in 0..d.n {
        for c in 0..d.c {
            for y in 0..od.h {
                for xx in 0..od.w {
                    let mut acc = T::zero();
                    for dy in 0..s {
                        for dx in 0..s {
                            acc = acc + x.at(n, c, y * s + dy, xx * s + dx);
                        }
                    }
                    out.push(acc * scale);
                }
            }
        }
    }
    Tensor::from_vec(od, out)
}

pub fn stride_subsample<V: Copy>(x: &Tensor<V>, s: usize) -> Result<Tensor<V>> {
    let d = x.dims();
    ensure_divisible("stride_subsample height", d.h, s)?;
    ensure_divisible("stride_subsample width", d.w, s)?;
    let od = Dims::new(d.n, d.c, d.h / s, d.w / s);
    let mut out = Vec::with_capacity(od.numel());
    for n in 0..d.n {
        for c in 0..d.c {
            for y in 0..od.h {
                for xx in 0..od.w {
                    out.push(x.at(n, c, y * s, xx * s));
                }
            }
        }
    }
    Tensor::from_vec(od, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_labels_fold_to_constant() {
        let y: Target<f64> = Target::Discrete(Tensor::full((1, 1, 32, 32), 3u32));
        let Target::Discrete(t) = fold_targets(&y, 2, 4).unwrap() else { panic!() };
        assert_eq!(t.dims(), Dims::new(1, 16, 4, 4));
        assert!(t.data().iter().all(|&v| v == 3));
    }

    #[test]
    fn unfold_inverts_fold_without_downsampling() {
        let y = Target::Continuous(Tensor::<f64>::uniform((2, 3, 16, 8), 1.0, 1));
        let folded = fold_targets(&y, 1, 4).unwrap();
        assert_eq!(folded.dims(), Dims::new(2, 48, 4, 2));
        assert_eq!(folded.unfold_grid(4).unwrap(), y);
    }

    #[test]
    fn average_pool_values() {
        let x = Tensor::from_vec((1, 1, 2, 4), vec![1.0, 3.0, 0.0, 0.0, 5.0, 7.0, 4.0, 8.0]).unwrap();
        let y = average_pool(&x, 2).unwrap();
        assert_eq!(y.data(), &[4.0, 3.0]);
    }

    #[test]
    fn indivisible_sizes_rejected() {
        let y: Target<f64> = Target::Continuous(Tensor::zeros((1, 1, 30, 32)));
        assert!(fold_targets(&y, 4, 8).is_err());
    }
}
