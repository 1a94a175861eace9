use crate::error::{Error, Result};
use crate::real::Real;

use super::{Shape, Tensor};

/// NaN passes through unchanged.
pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    out.clear_grad();
    out.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero();
        }
    });
    out
}

/// Passes the gradient where the input is strictly positive (subgradient 0 at 0).
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch {
            op: "relu_backward",
            detail: format!("input {} vs grad {}", input.shape(), grad_out.shape()),
        });
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

pub fn concat_channels<T: Real>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs.first().ok_or(Error::EmptyInput("concat_channels"))?.shape();
    let mut channels = 0;
    for t in inputs {
        let s = t.shape();
        if s.n() != first.n() || s.h() != first.h() || s.w() != first.w() {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                detail: format!("{s} does not match {first} outside the channel axis"),
            });
        }
        channels += s.c();
    }
    let out_shape = Shape::new(first.n(), channels, first.h(), first.w());
    let mut data = Vec::with_capacity(out_shape.len());
    for n in 0..first.n() {
        for t in inputs {
            data.extend_from_slice(t.sample(n));
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Splits along channels into consecutive groups of the given sizes.
pub fn split_channels<T: Real>(input: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let s = input.shape();
    if sizes.iter().sum::<usize>() != s.c() {
        return Err(Error::ShapeMismatch {
            op: "split_channels",
            detail: format!("sizes {sizes:?} do not sum to {} channels", s.c()),
        });
    }
    let plane = s.plane();
    let mut parts: Vec<Vec<T>> = sizes
        .iter()
        .map(|c| Vec::with_capacity(s.n() * c * plane))
        .collect();
    for n in 0..s.n() {
        let mut off = 0;
        let sample = input.sample(n);
        for (part, &c) in parts.iter_mut().zip(sizes) {
            part.extend_from_slice(&sample[off * plane..(off + c) * plane]);
            off += c;
        }
    }
    parts
        .into_iter()
        .zip(sizes)
        .map(|(d, &c)| Tensor::from_vec(Shape::new(s.n(), c, s.h(), s.w()), d))
        .collect()
}

pub fn concat_channels_backward<T: Real>(grad_out: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    split_channels(grad_out, sizes)
}
