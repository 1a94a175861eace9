use crate::error::{Error, Result};
use crate::real::Real;

use super::conv::{transposed_conv2, transposed_conv2_backward, ConvGrads};
use super::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResampleMode {
    MaxPool2,
    NearestUp2,
    TransposedConv2,
}

/// Flat input index of the selected maximum for each pooled output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: Shape,
    pub argmax: Vec<usize>,
}

pub fn maxpool2<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let s = input.shape();
    for extent in [s.h(), s.w()] {
        if extent % 2 != 0 || extent == 0 {
            return Err(Error::Indivisible {
                op: "maxpool2",
                extent,
                divisor: 2,
            });
        }
    }
    let (h, w) = (s.h(), s.w());
    let (ho, wo) = (h / 2, w / 2);
    let out_shape = Shape::new(s.n(), s.c(), ho, wo);
    let x = input.data();
    let mut out = Vec::with_capacity(out_shape.len());
    let mut argmax = Vec::with_capacity(out_shape.len());
    for plane in 0..s.n() * s.c() {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    // strict comparison keeps the first row-major maximum on ties
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::from_vec(out_shape, out)?,
        PoolIndices {
            input_shape: s,
            argmax,
        },
    ))
}

pub fn maxpool2_backward<T: Real>(indices: &PoolIndices, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.len() != indices.argmax.len() {
        return Err(Error::ShapeMismatch {
            op: "maxpool2_backward",
            detail: format!("grad {} vs {} pooled outputs", grad_out.shape(), indices.argmax.len()),
        });
    }
    let mut gx = Tensor::zeros(indices.input_shape);
    let g = gx.data_mut();
    for (&i, &v) in indices.argmax.iter().zip(grad_out.data()) {
        g[i] += v;
    }
    Ok(gx)
}

pub fn nearest_up2<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let (h, w) = (s.h(), s.w());
    let out_shape = Shape::new(s.n(), s.c(), 2 * h, 2 * w);
    let x = input.data();
    let mut out = Vec::with_capacity(out_shape.len());
    for plane in 0..s.n() * s.c() {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for y in 0..2 * h {
            let row = &src[(y / 2) * w..(y / 2 + 1) * w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Tensor::from_vec(out_shape, out).expect("sized by construction")
}

pub fn nearest_up2_backward<T: Real>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let s = grad_out.shape();
    if !s.h().is_multiple_of(2) || !s.w().is_multiple_of(2) {
        return Err(Error::Indivisible {
            op: "nearest_up2_backward",
            extent: if !s.h().is_multiple_of(2) { s.h() } else { s.w() },
            divisor: 2,
        });
    }
    let (h, w) = (s.h() / 2, s.w() / 2);
    let in_shape = Shape::new(s.n(), s.c(), h, w);
    let g = grad_out.data();
    let mut gx = Vec::with_capacity(in_shape.len());
    for plane in 0..s.n() * s.c() {
        let base = plane * 4 * h * w;
        for y in 0..h {
            for x in 0..w {
                let r0 = base + 2 * y * 2 * w + 2 * x;
                let r1 = r0 + 2 * w;
                gx.push(g[r0] + g[r0 + 1] + g[r1] + g[r1 + 1]);
            }
        }
    }
    Tensor::from_vec(in_shape, gx)
}

/// What the backward pass of [`resample`] needs.
#[derive(Debug, Clone)]
pub enum ResampleCache {
    Pool(Vec<PoolIndices>),
    Nearest { stages: usize },
    Transposed,
}

/// Scales spatial extents by 2^(∓factor_log2). Pooling and nearest modes are
/// applied `factor_log2` times; the transposed mode is a single learned ×2 step.
pub fn resample<T: Real>(
    input: &Tensor<T>,
    mode: ResampleMode,
    factor_log2: usize,
    weight: Option<&Tensor<T>>,
    bias: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, ResampleCache)> {
    if factor_log2 == 0 {
        return Err(Error::InvalidConfig("resample factor must be positive".into()));
    }
    match mode {
        ResampleMode::MaxPool2 => {
            let div = 1usize << factor_log2;
            let s = input.shape();
            for extent in [s.h(), s.w()] {
                if extent % div != 0 || extent == 0 {
                    return Err(Error::Indivisible {
                        op: "maxpool2",
                        extent,
                        divisor: div,
                    });
                }
            }
            let mut cur = input.clone();
            let mut stages = Vec::with_capacity(factor_log2);
            for _ in 0..factor_log2 {
                let (next, idx) = maxpool2(&cur)?;
                stages.push(idx);
                cur = next;
            }
            Ok((cur, ResampleCache::Pool(stages)))
        }
        ResampleMode::NearestUp2 => {
            let mut cur = nearest_up2(input);
            for _ in 1..factor_log2 {
                cur = nearest_up2(&cur);
            }
            Ok((
                cur,
                ResampleCache::Nearest {
                    stages: factor_log2,
                },
            ))
        }
        ResampleMode::TransposedConv2 => {
            if factor_log2 != 1 {
                return Err(Error::InvalidConfig(
                    "transposed resampling supports factor_log2 = 1 only".into(),
                ));
            }
            Ok((transposed_conv2(input, weight, bias)?, ResampleCache::Transposed))
        }
    }
}

/// Gradient of [`resample`]. Weight and bias gradients are only present for
/// the transposed mode.
pub fn resample_backward<T: Real>(
    cache: &ResampleCache,
    input: &Tensor<T>,
    weight: Option<&Tensor<T>>,
    has_bias: bool,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let input_grad = match cache {
        ResampleCache::Pool(stages) => {
            let mut g = grad_out.clone();
            for idx in stages.iter().rev() {
                g = maxpool2_backward(idx, &g)?;
            }
            g
        }
        ResampleCache::Nearest { stages } => {
            let mut g = grad_out.clone();
            for _ in 0..*stages {
                g = nearest_up2_backward(&g)?;
            }
            g
        }
        ResampleCache::Transposed => {
            let w = weight.ok_or(Error::MissingWeight("transposed_conv2"))?;
            return transposed_conv2_backward(input, w, has_bias, grad_out);
        }
    };
    Ok(ConvGrads {
        input: input_grad,
        weight: Tensor::zeros(Shape::default()),
        bias: None,
    })
}
