//! Dense rank-4 tensors and the primitive operations the networks are built
//! from. Every operation comes as a forward function plus an analytic backward.

mod activation;
mod conv;
mod loss;
mod norm;
mod resample;

pub use activation::{concat_channels, concat_channels_backward, relu, relu_backward, split_channels};
pub use conv::{
    conv2d, conv2d_backward, transposed_conv2, transposed_conv2_backward, ConvGrads, ConvSpec,
};
pub use loss::{softmax_cross_entropy, LossOutput};
pub use norm::{batch_norm, batch_norm_backward, BatchNormCache, BnMode, BnState, BN_EPSILON, BN_MOMENTUM};
pub use resample::{
    maxpool2, maxpool2_backward, nearest_up2, nearest_up2_backward, resample, resample_backward,
    PoolIndices, ResampleCache, ResampleMode,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;

/// Extents in (batch, channels, height, width) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }
    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }
    pub fn len(&self) -> usize {
        self.0.iter().product()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Elements in one sample.
    pub fn sample_len(&self) -> usize {
        self.c() * self.h() * self.w()
    }
    pub fn plane(&self) -> usize {
        self.h() * self.w()
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "{n}x{c}x{h}x{w}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.len()],
            grad: None,
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("{} values for shape {shape}", data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> T) -> Self {
        Self {
            shape,
            data: (0..shape.len()).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient slot, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); len])
    }

    pub fn set_grad(&mut self, grad: Option<Vec<T>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(Error::ShapeMismatch {
                    op: "set_grad",
                    detail: format!("gradient of {} for {} values", g.len(), self.data.len()),
                });
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let s = self.shape;
        self.data[((n * s.c() + c) * s.h() + h) * s.w() + w]
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.len() != self.shape.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{} to {}", self.shape, shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let l = self.shape.sample_len();
        &self.data[n * l..(n + 1) * l]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect()),
        }
    }
}

/// A learnable tensor with a per-element freeze mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub frozen_mask: Vec<bool>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        let len = tensor.len();
        Self {
            name: name.into(),
            tensor,
            frozen_mask: vec![false; len],
        }
    }

    pub fn len(&self) -> usize {
        self.tensor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensor.is_empty()
    }

    pub fn values(&self) -> &[T] {
        self.tensor.data()
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen_mask.iter().filter(|&&f| f).count()
    }

    pub fn cast<U: Real>(&self) -> Parameter<U> {
        Parameter {
            name: self.name.clone(),
            tensor: self.tensor.cast(),
            frozen_mask: self.frozen_mask.clone(),
        }
    }
}

/// Zero-mean uniform init with bound √(6/(fan_in+fan_out)).
pub fn glorot_uniform<T: Real, R: Rng + ?Sized>(
    shape: Shape,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
}
