//! Direct grouped 2-D convolution with zero padding.
//!
//! Depthwise convolution is `groups == c_in == c_out`; pointwise group
//! convolution is `k == 1`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_divisible, shape_err, Error, Result};
use crate::tensor::{Dims, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub groups: usize,
    pub padding: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride 1, one group, "same" padding, no bias.
    pub fn new(c_in: usize, c_out: usize, k: usize) -> Self {
        Self {
            c_in,
            c_out,
            k,
            stride: 1,
            groups: 1,
            padding: k / 2,
            bias: false,
        }
    }

    pub fn depthwise(c: usize, k: usize) -> Self {
        Self::new(c, c, k).groups(c)
    }

    pub fn pointwise(c_in: usize, c_out: usize, groups: usize) -> Self {
        Self::new(c_in, c_out, 1).groups(groups)
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 || self.k == 0 || self.stride == 0 {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                detail: format!("channels, kernel and stride must be positive: {self:?}"),
            });
        }
        ensure_divisible("conv2d groups (c_in)", self.c_in, self.groups)?;
        ensure_divisible("conv2d groups (c_out)", self.c_out, self.groups)?;
        Ok(())
    }

    pub fn c_in_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn c_out_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    pub fn weight_dims(&self) -> Dims {
        Dims::new(self.c_out, self.c_in_per_group(), self.k, self.k)
    }

    pub fn weight_numel(&self) -> usize {
        self.weight_dims().numel()
    }

    pub fn fan_in(&self) -> usize {
        self.c_in_per_group() * self.k * self.k
    }

    /// Output spatial extent, or `None` when the kernel does not fit.
    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let span = |x: usize| {
            let padded = x + 2 * self.padding;
            (padded >= self.k).then(|| (padded - self.k) / self.stride + 1)
        };
        Some((span(h)?, span(w)?))
    }

    pub fn out_dims(&self, input: Dims) -> Result<Dims> {
        self.validate()?;
        if input.c != self.c_in {
            return shape_err(
                "conv2d",
                format!("input has {} channels, spec expects {}", input.c, self.c_in),
            );
        }
        if input.h == 0 || input.w == 0 {
            return shape_err("conv2d", format!("empty spatial extent {input}"));
        }
        let (oh, ow) = self
            .out_hw(input.h, input.w)
            .ok_or_else(|| Error::Shape {
                op: "conv2d",
                detail: format!("kernel {} does not fit {input}", self.k),
            })?;
        Ok(Dims::new(input.n, self.c_out, oh, ow))
    }

    /// Multiply-adds for one forward pass on `input`.
    pub fn macs(&self, input: Dims) -> Result<u64> {
        let out = self.out_dims(input)?;
        Ok((self.weight_numel() * out.h * out.w * out.n) as u64)
    }
}

/// Channels `[g·cpg, (g+1)·cpg)` of `t` as a `cpg × (n·h·w)` matrix.
fn gather_group<T: Scalar>(t: &Tensor<T>, g: usize, cpg: usize) -> Vec<T> {
    let d = t.dims();
    let plane = d.plane();
    let mut out = Vec::with_capacity(cpg * d.n * plane);
    for cl in 0..cpg {
        for n in 0..d.n {
            out.extend_from_slice(t.plane(n, g * cpg + cl));
        }
    }
    out
}

/// Inverse of [`gather_group`]: writes a `cpg × (n·h·w)` matrix back into `data`.
fn scatter_group<T: Scalar>(data: &mut [T], d: Dims, g: usize, cpg: usize, m: &[T]) {
    let plane = d.plane();
    for cl in 0..cpg {
        for n in 0..d.n {
            let src = &m[(cl * d.n + n) * plane..][..plane];
            data[d.offset(n, g * cpg + cl, 0, 0)..][..plane].copy_from_slice(src);
        }
    }
}

/// Input column of output column `o` at kernel offset `kx`, if inside the image.
#[inline]
fn source(o: usize, kx: usize, s: usize, p: usize, len: usize) -> Option<usize> {
    (o * s + kx).checked_sub(p).filter(|&i| i < len)
}

/// Patch matrix of group `g`: rows `(icl, ky, kx)`, columns `(n, oy, ox)`.
fn im2col<T: Scalar>(x: &Tensor<T>, spec: &ConvSpec, g: usize, out_d: Dims) -> Vec<T> {
    let in_d = x.dims();
    let (k, s, p, cig) = (spec.k, spec.stride, spec.padding, spec.c_in_per_group());
    if k == 1 && s == 1 && p == 0 {
        return gather_group(x, g, cig);
    }
    let cols = in_d.n * out_d.plane();
    let mut col = vec![T::zero(); cig * k * k * cols];
    for icl in 0..cig {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((icl * k + ky) * k + kx) * cols..][..cols];
                for n in 0..in_d.n {
                    let iplane = x.plane(n, g * cig + icl);
                    let orow = &mut row[n * out_d.plane()..][..out_d.plane()];
                    for oy in 0..out_d.h {
                        let Some(iy) = source(oy, ky, s, p, in_d.h) else { continue };
                        let irow = &iplane[iy * in_d.w..][..in_d.w];
                        for ox in 0..out_d.w {
                            if let Some(ix) = source(ox, kx, s, p, in_d.w) {
                                orow[oy * out_d.w + ox] = irow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adds a patch-matrix gradient back onto the `cig × (n·h·w)` input layout.
fn col2im<T: Scalar>(col: &[T], spec: &ConvSpec, in_d: Dims, out_d: Dims) -> Vec<T> {
    let (k, s, p, cig) = (spec.k, spec.stride, spec.padding, spec.c_in_per_group());
    if k == 1 && s == 1 && p == 0 {
        return col.to_vec();
    }
    let cols = in_d.n * out_d.plane();
    let mut out = vec![T::zero(); cig * in_d.n * in_d.plane()];
    for icl in 0..cig {
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((icl * k + ky) * k + kx) * cols..][..cols];
                for n in 0..in_d.n {
                    let iplane = &mut out[(icl * in_d.n + n) * in_d.plane()..][..in_d.plane()];
                    let orow = &row[n * out_d.plane()..][..out_d.plane()];
                    for oy in 0..out_d.h {
                        let Some(iy) = source(oy, ky, s, p, in_d.h) else { continue };
                        for ox in 0..out_d.w {
                            if let Some(ix) = source(ox, kx, s, p, in_d.w) {
                                let v = &mut iplane[iy * in_d.w + ix];
                                *v = *v + orow[oy * out_d.w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn is_depthwise(spec: &ConvSpec) -> bool {
    spec.groups == spec.c_in && spec.groups == spec.c_out
}

/// Depthwise forward: one k×k filter per channel, looped directly.
fn depthwise_forward<T: Scalar>(x: &Tensor<T>, wd: &[T], spec: &ConvSpec, out: &mut Tensor<T>) {
    let (in_d, out_d) = (x.dims(), out.dims());
    let (k, s, p) = (spec.k, spec.stride, spec.padding);
    out.data_mut()
        .par_chunks_mut(out_d.plane().max(1))
        .enumerate()
        .for_each(|(idx, oplane)| {
            let c = idx % in_d.c;
            let iplane = x.plane(idx / in_d.c, c);
            let w = &wd[c * k * k..][..k * k];
            for oy in 0..out_d.h {
                for ky in 0..k {
                    let Some(iy) = source(oy, ky, s, p, in_d.h) else { continue };
                    let irow = &iplane[iy * in_d.w..][..in_d.w];
                    for ox in 0..out_d.w {
                        let mut acc = T::zero();
                        for kx in 0..k {
                            if let Some(ix) = source(ox, kx, s, p, in_d.w) {
                                acc = acc + w[ky * k + kx] * irow[ix];
                            }
                        }
                        let o = &mut oplane[oy * out_d.w + ox];
                        *o = *o + acc;
                    }
                }
            }
        });
}

fn depthwise_backward_input<T: Scalar>(g: &Tensor<T>, wd: &[T], spec: &ConvSpec, gin: &mut Tensor<T>) {
    let (in_d, out_d) = (gin.dims(), g.dims());
    let (k, s, p) = (spec.k, spec.stride, spec.padding);
    gin.data_mut()
        .par_chunks_mut(in_d.plane().max(1))
        .enumerate()
        .for_each(|(idx, iplane)| {
            let c = idx % in_d.c;
            let gplane = g.plane(idx / in_d.c, c);
            let w = &wd[c * k * k..][..k * k];
            for oy in 0..out_d.h {
                for ky in 0..k {
                    let Some(iy) = source(oy, ky, s, p, in_d.h) else { continue };
                    for ox in 0..out_d.w {
                        let go = gplane[oy * out_d.w + ox];
                        for kx in 0..k {
                            if let Some(ix) = source(ox, kx, s, p, in_d.w) {
                                let v = &mut iplane[iy * in_d.w + ix];
                                *v = *v + w[ky * k + kx] * go;
                            }
                        }
                    }
                }
            }
        });
}

fn depthwise_backward_weight<T: Scalar>(g: &Tensor<T>, x: &Tensor<T>, spec: &ConvSpec, gw: &mut Tensor<T>) {
    let (in_d, out_d) = (x.dims(), g.dims());
    let (k, s, p) = (spec.k, spec.stride, spec.padding);
    gw.data_mut()
        .par_chunks_mut(k * k)
        .enumerate()
        .for_each(|(c, wc)| {
            for n in 0..in_d.n {
                let (iplane, gplane) = (x.plane(n, c), g.plane(n, c));
                for oy in 0..out_d.h {
                    for ky in 0..k {
                        let Some(iy) = source(oy, ky, s, p, in_d.h) else { continue };
                        for ox in 0..out_d.w {
                            let go = gplane[oy * out_d.w + ox];
                            for kx in 0..k {
                                if let Some(ix) = source(ox, kx, s, p, in_d.w) {
                                    wc[ky * k + kx] = wc[ky * k + kx] + go * iplane[iy * in_d.w + ix];
                                }
                            }
                        }
                    }
                }
            }
        });
}

pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let in_d = x.dims();
    let out_d = spec.out_dims(in_d)?;
    if weight.dims() != spec.weight_dims() {
        return shape_err(
            "conv2d",
            format!("weight dims {} != expected {}", weight.dims(), spec.weight_dims()),
        );
    }
    if let Some(b) = bias {
        if b.dims() != Dims::new(1, spec.c_out, 1, 1) {
            return shape_err("conv2d", format!("bias dims {} for {} outputs", b.dims(), spec.c_out));
        }
    }
    let mut out = Tensor::zeros(out_d);
    let wd = weight.data();
    if is_depthwise(spec) {
        depthwise_forward(x, wd, spec, &mut out);
        add_bias(&mut out, bias);
        return Ok(out);
    }
    let cog = spec.c_out_per_group();
    let rows = spec.fan_in();
    let cols = in_d.n * out_d.plane();
    let per_group: Vec<Vec<T>> = (0..spec.groups)
        .into_par_iter()
        .map(|g| {
            let col = im2col(x, spec, g, out_d);
            let mut y = vec![T::zero(); cog * cols];
            let w = &wd[g * cog * rows..][..cog * rows];
            T::gemm(cog, rows, cols, w, (rows, 1), &col, (cols, 1), T::zero(), &mut y, (cols, 1));
            y
        })
        .collect();
    for (g, y) in per_group.iter().enumerate() {
        scatter_group(out.data_mut(), out_d, g, cog, y);
    }
    add_bias(&mut out, bias);
    Ok(out)
}

fn add_bias<T: Scalar>(out: &mut Tensor<T>, bias: Option<&Tensor<T>>) {
    let Some(b) = bias else { return };
    let d = out.dims();
    for (i, chunk) in out.data_mut().chunks_mut(d.plane().max(1)).enumerate() {
        let bv = b.data()[i % d.c];
        chunk.iter_mut().for_each(|v| *v = *v + bv);
    }
}

/// Gradient with respect to the convolution input.
pub fn conv2d_backward_input<T: Scalar>(
    grad_out: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    in_d: Dims,
) -> Tensor<T> {
    let out_d = grad_out.dims();
    if is_depthwise(spec) {
        let mut gin = Tensor::zeros(in_d);
        depthwise_backward_input(grad_out, weight.data(), spec, &mut gin);
        return gin;
    }
    let (cig, cog) = (spec.c_in_per_group(), spec.c_out_per_group());
    let rows = spec.fan_in();
    let cols = out_d.n * out_d.plane();
    let wd = weight.data();
    let per_group: Vec<Vec<T>> = (0..spec.groups)
        .into_par_iter()
        .map(|g| {
            let go = gather_group(grad_out, g, cog);
            let w = &wd[g * cog * rows..][..cog * rows];
            let mut gcol = vec![T::zero(); rows * cols];
            // Wᵀ is `rows × cog` with strides (1, rows).
            T::gemm(rows, cog, cols, w, (1, rows), &go, (cols, 1), T::zero(), &mut gcol, (cols, 1));
            col2im(&gcol, spec, in_d, out_d)
        })
        .collect();
    let mut gin = Tensor::zeros(in_d);
    for (g, m) in per_group.iter().enumerate() {
        scatter_group(gin.data_mut(), in_d, g, cig, m);
    }
    gin
}

/// Gradient with respect to the convolution weight.
pub fn conv2d_backward_weight<T: Scalar>(grad_out: &Tensor<T>, x: &Tensor<T>, spec: &ConvSpec) -> Tensor<T> {
    let out_d = grad_out.dims();
    let cog = spec.c_out_per_group();
    let rows = spec.fan_in();
    let cols = out_d.n * out_d.plane();
    let mut gw = Tensor::zeros(spec.weight_dims());
    if is_depthwise(spec) {
        depthwise_backward_weight(grad_out, x, spec, &mut gw);
        return gw;
    }
    gw.data_mut()
        .par_chunks_mut(cog * rows)
        .enumerate()
        .for_each(|(g, gw_g)| {
            let go = gather_group(grad_out, g, cog);
            let col = im2col(x, spec, g, out_d);
            // colᵀ is `cols × rows` with strides (1, cols).
            T::gemm(cog, cols, rows, &go, (cols, 1), &col, (1, cols), T::zero(), gw_g, (rows, 1));
        });
    gw
}

/// Per-channel sum over `(n, h, w)`, shaped `(1, c, 1, 1)`.
pub fn channel_sum<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let d = t.dims();
    let mut out = Tensor::zeros(Dims::new(1, d.c, 1, 1));
    for n in 0..d.n {
        for c in 0..d.c {
            let s: T = t.plane(n, c).iter().copied().sum();
            out.data_mut()[c] = out.data()[c] + s;
        }
    }
    out
}
