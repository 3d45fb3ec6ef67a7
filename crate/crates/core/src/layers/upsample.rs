//! Bilinear upsampling by an integer factor with half-pixel-center alignment.
//!
//! Output coordinate `o` samples source coordinate `(o + 0.5) / f - 0.5`,
//! clamped to `[0, len - 1]`.

use crate::error::{invalid, Result};
use crate::tensor::{Dims, Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn taps<T: Scalar>(len: usize, factor: usize) -> Vec<Tap<T>> {
    let f = factor as f64;
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / f - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            Tap {
                lo,
                hi,
                frac: T::from_f64_lossy(src - lo as f64),
            }
        })
        .collect()
}

pub fn bilinear_upsample<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return invalid("bilinear_upsample", "factor must be positive");
    }
    let d = x.dims();
    let od = Dims::new(d.n, d.c, d.h * factor, d.w * factor);
    if factor == 1 || d.numel() == 0 {
        return Ok(x.clone());
    }
    let ty = taps::<T>(d.h, factor);
    let tx = taps::<T>(d.w, factor);
    let mut out = Tensor::zeros(od);
    for n in 0..d.n {
        for c in 0..d.c {
            let src = x.plane(n, c);
            let base = od.offset(n, c, 0, 0);
            for (oy, a) in ty.iter().enumerate() {
                for (ox, b) in tx.iter().enumerate() {
                    let top = src[a.lo * d.w + b.lo] * (T::one() - b.frac) + src[a.lo * d.w + b.hi] * b.frac;
                    let bot = src[a.hi * d.w + b.lo] * (T::one() - b.frac) + src[a.hi * d.w + b.hi] * b.frac;
                    out.data_mut()[base + oy * od.w + ox] = top * (T::one() - a.frac) + bot * a.frac;
                }
            }
        }
    }
    Ok(out)
}

pub fn bilinear_upsample_backward<T: Scalar>(grad_out: &Tensor<T>, in_d: Dims, factor: usize) -> Tensor<T> {
    if factor == 1 {
        return grad_out.clone();
    }
    let od = grad_out.dims();
    let ty = taps::<T>(in_d.h, factor);
    let tx = taps::<T>(in_d.w, factor);
    let mut gin = Tensor::zeros(in_d);
    for n in 0..in_d.n {
        for c in 0..in_d.c {
            let gbase = od.offset(n, c, 0, 0);
            let ibase = in_d.offset(n, c, 0, 0);
            for (oy, a) in ty.iter().enumerate() {
                for (ox, b) in tx.iter().enumerate() {
                    let g = grad_out.data()[gbase + oy * od.w + ox];
                    let d = gin.data_mut();
                    let (wy0, wy1) = (T::one() - a.frac, a.frac);
                    let (wx0, wx1) = (T::one() - b.frac, b.frac);
                    d[ibase + a.lo * in_d.w + b.lo] = d[ibase + a.lo * in_d.w + b.lo] + g * wy0 * wx0;
                    d[ibase + a.lo * in_d.w + b.hi] = d[ibase + a.lo * in_d.w + b.hi] + g * wy0 * wx1;
                    d[ibase + a.hi * in_d.w + b.lo] = d[ibase + a.hi * in_d.w + b.lo] + g * wy1 * wx0;
                    d[ibase + a.hi * in_d.w + b.hi] = d[ibase + a.hi * in_d.w + b.hi] + g * wy1 * wx1;
                }
            }
        }
    }
    gin
}
