use crate::error::{shape_err, Result};
use crate::tensor::{Dims, Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let data = grad_out
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.dims(), data).expect("same dims")
}

/// Channel-wise PReLU: `x` if positive, else `slope[c] * x`.
pub fn prelu<T: Scalar>(x: &Tensor<T>, slope: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.dims();
    if slope.dims() != Dims::new(1, d.c, 1, 1) {
        return shape_err("prelu", format!("slope dims {} for input {d}", slope.dims()));
    }
    let mut out = x.clone();
    for n in 0..d.n {
        for c in 0..d.c {
            let a = slope.data()[c];
            let off = d.offset(n, c, 0, 0);
            for v in &mut out.data_mut()[off..off + d.plane()] {
                if *v <= T::zero() {
                    *v = a * *v;
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_x, grad_slope)`.
pub fn prelu_backward<T: Scalar>(grad_out: &Tensor<T>, x: &Tensor<T>, slope: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let d = x.dims();
    let mut gx = Tensor::zeros(d);
    let mut ga = Tensor::zeros(slope.dims());
    for n in 0..d.n {
        for c in 0..d.c {
            let a = slope.data()[c];
            let off = d.offset(n, c, 0, 0);
            let mut acc = T::zero();
            for i in off..off + d.plane() {
                let (g, v) = (grad_out.data()[i], x.data()[i]);
                if v > T::zero() {
                    gx.data_mut()[i] = g;
                } else {
                    gx.data_mut()[i] = a * g;
                    acc = acc + g * v;
                }
            }
            ga.data_mut()[c] = ga.data()[c] + acc;
        }
    }
    (gx, ga)
}
