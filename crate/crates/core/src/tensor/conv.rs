use crate::error::{Error, Result};
use crate::par;
use crate::real::{matmul, MatRef, Real};

use super::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// 3×3, stride 1, padding 1: spatial size preserved.
    pub fn same3x3(out_channels: usize, has_bias: bool) -> Self {
        Self {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
            has_bias,
        }
    }

    pub fn pointwise(out_channels: usize, has_bias: bool) -> Self {
        Self {
            out_channels,
            kernel: 1,
            stride: 1,
            padding: 0,
            has_bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConvSpec(m.to_string()));
        if self.out_channels == 0 {
            return bad("out_channels must be positive");
        }
        match (self.kernel, self.stride, self.padding) {
            (3, 1, 1) => Ok(()),
            (3, _, _) => bad("a 3x3 kernel requires stride 1 and padding 1"),
            (1, 1 | 2, 0) => Ok(()),
            (1, _, 0) => bad("stride must be 1 or 2"),
            (1, _, _) => bad("a 1x1 kernel requires padding 0"),
            (k, _, _) => bad(&format!("unsupported kernel size {k}")),
        }
    }

    pub fn output_extent(&self, extent: usize) -> Option<usize> {
        let padded = extent + 2 * self.padding;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    pub fn weight_shape(&self, in_channels: usize) -> Shape {
        Shape::new(self.out_channels, in_channels, self.kernel, self.kernel)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        let h = self.output_extent(input.h());
        let w = self.output_extent(input.w());
        match (h, w) {
            (Some(h), Some(w)) if h > 0 && w > 0 => {
                Ok(Shape::new(input.n(), self.out_channels, h, w))
            }
            _ => Err(Error::EmptyOutput { op: "conv2d" }),
        }
    }

    fn is_identity_gather(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn check_conv<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Shape> {
    let out = spec.output_shape(input.shape())?;
    let expected = spec.weight_shape(input.shape().c());
    if weight.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("weight {} but input needs {expected}", weight.shape()),
        });
    }
    match (spec.has_bias, bias) {
        (true, Some(b)) if b.len() == spec.out_channels => {}
        (true, _) => {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias must have {} values", spec.out_channels),
            })
        }
        (false, Some(_)) => {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: "bias given for a bias-free spec".into(),
            })
        }
        (false, None) => {}
    }
    Ok(out)
}

/// Unfolds one sample into a (C·k·k) × (Ho·Wo) patch matrix.
fn im2col<T: Real>(x: &[T], in_shape: Shape, out_shape: Shape, spec: &ConvSpec, cols: &mut [T]) {
    let (c_in, h, w) = (in_shape.c(), in_shape.h(), in_shape.w());
    let (ho, wo) = (out_shape.h(), out_shape.w());
    let k = spec.kernel;
    let plane = ho * wo;
    for c in 0..c_in {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im<T: Real>(cols: &[T], in_shape: Shape, out_shape: Shape, spec: &ConvSpec, gx: &mut [T]) {
    let (c_in, h, w) = (in_shape.c(), in_shape.h(), in_shape.w());
    let (ho, wo) = (out_shape.h(), out_shape.w());
    let k = spec.kernel;
    let plane = ho * wo;
    gx.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..c_in {
        let gc = &mut gx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut gc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let out_shape = check_conv(input, weight, bias, spec)?;
    let in_shape = input.shape();
    let patch = in_shape.c() * spec.kernel * spec.kernel;
    let plane = out_shape.plane();
    let mut out = Tensor::zeros(out_shape);
    par::for_each_chunk(out.data_mut(), out_shape.sample_len(), |n, y| {
        let x = input.sample(n);
        let mut scratch;
        let cols: &[T] = if spec.is_identity_gather() {
            x
        } else {
            scratch = vec![T::zero(); patch * plane];
            im2col(x, in_shape, out_shape, spec, &mut scratch);
            &scratch
        };
        matmul(
            MatRef::new(weight.data(), spec.out_channels, patch),
            MatRef::new(cols, patch, plane),
            y,
            false,
        );
        if let Some(b) = bias {
            for (o, row) in y.chunks_mut(plane).enumerate() {
                let bo = b.data()[o];
                row.iter_mut().for_each(|v| *v += bo);
            }
        }
    });
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

fn sum_in_order<T: Real>(parts: impl Iterator<Item = Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
    }
    acc
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let in_shape = input.shape();
    let out_shape = spec.output_shape(in_shape)?;
    if grad_out.shape() != out_shape {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            detail: format!("grad {} vs output {out_shape}", grad_out.shape()),
        });
    }
    let patch = in_shape.c() * spec.kernel * spec.kernel;
    let plane = out_shape.plane();
    let o = spec.out_channels;

    let per_sample = par::map_indexed(in_shape.n(), |n| {
        let x = input.sample(n);
        let gy = grad_out.sample(n);
        let mut scratch;
        let cols: &[T] = if spec.is_identity_gather() {
            x
        } else {
            scratch = vec![T::zero(); patch * plane];
            im2col(x, in_shape, out_shape, spec, &mut scratch);
            &scratch
        };
        let mut gw = vec![T::zero(); o * patch];
        matmul(
            MatRef::new(gy, o, plane),
            MatRef::new(cols, patch, plane).t(),
            &mut gw,
            false,
        );
        let mut gcols = vec![T::zero(); patch * plane];
        matmul(
            MatRef::new(weight.data(), o, patch).t(),
            MatRef::new(gy, o, plane),
            &mut gcols,
            false,
        );
        let gx = if spec.is_identity_gather() {
            gcols
        } else {
            let mut gx = vec![T::zero(); in_shape.sample_len()];
            col2im(&gcols, in_shape, out_shape, spec, &mut gx);
            gx
        };
        let gb: Vec<T> = if spec.has_bias {
            gy.chunks(plane).map(|r| r.iter().copied().sum()).collect()
        } else {
            Vec::new()
        };
        (gx, gw, gb)
    });

    let mut gin = Vec::with_capacity(in_shape.len());
    let mut gws = Vec::with_capacity(per_sample.len());
    let mut gbs = Vec::with_capacity(per_sample.len());
    for (gx, gw, gb) in per_sample {
        gin.extend(gx);
        gws.push(gw);
        gbs.push(gb);
    }
    let gw = sum_in_order(gws.into_iter(), o * patch);
    let bias = if spec.has_bias {
        Some(Tensor::from_vec(
            Shape::new(o, 1, 1, 1),
            sum_in_order(gbs.into_iter(), o),
        )?)
    } else {
        None
    };
    Ok(ConvGrads {
        input: Tensor::from_vec(in_shape, gin)?,
        weight: Tensor::from_vec(weight.shape(), gw)?,
        bias,
    })
}

fn check_transposed<T: Real>(
    input: &Tensor<T>,
    weight: Option<&Tensor<T>>,
    bias: Option<&Tensor<T>>,
) -> Result<(Shape, usize)> {
    let weight = weight.ok_or(Error::MissingWeight("transposed_conv2"))?;
    let ws = weight.shape();
    let s = input.shape();
    if ws.n() != s.c() || ws.h() != 2 || ws.w() != 2 || ws.c() == 0 {
        return Err(Error::ShapeMismatch {
            op: "transposed_conv2",
            detail: format!("weight {ws} for input {s}; expected ({}, C_out, 2, 2)", s.c()),
        });
    }
    let c_out = ws.c();
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::ShapeMismatch {
                op: "transposed_conv2",
                detail: format!("bias has {} values, expected {c_out}", b.len()),
            });
        }
    }
    Ok((Shape::new(s.n(), c_out, s.h() * 2, s.w() * 2), c_out))
}

/// 2×2 stride-2 transposed convolution; weight layout (C_in, C_out, 2, 2).
pub fn transposed_conv2<T: Real>(
    input: &Tensor<T>,
    weight: Option<&Tensor<T>>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (out_shape, c_out) = check_transposed(input, weight, bias)?;
    let weight = weight.expect("checked");
    let s = input.shape();
    let (h, w) = (s.h(), s.w());
    let hw = h * w;
    let mut out = Tensor::zeros(out_shape);
    par::for_each_chunk(out.data_mut(), out_shape.sample_len(), |n, y| {
        let mut cols = vec![T::zero(); c_out * 4 * hw];
        matmul(
            MatRef::new(weight.data(), s.c(), c_out * 4).t(),
            MatRef::new(input.sample(n), s.c(), hw),
            &mut cols,
            false,
        );
        let w2 = 2 * w;
        for o in 0..c_out {
            let bo = bias.map_or(T::zero(), |b| b.data()[o]);
            let yo = &mut y[o * 4 * hw..(o + 1) * 4 * hw];
            for d in 0..4 {
                let (dy, dx) = (d / 2, d % 2);
                let src = &cols[(o * 4 + d) * hw..(o * 4 + d + 1) * hw];
                for iy in 0..h {
                    for ix in 0..w {
                        yo[(2 * iy + dy) * w2 + 2 * ix + dx] = src[iy * w + ix] + bo;
                    }
                }
            }
        }
    });
    Ok(out)
}

pub fn transposed_conv2_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (out_shape, c_out) = check_transposed(input, Some(weight), None)?;
    if grad_out.shape() != out_shape {
        return Err(Error::ShapeMismatch {
            op: "transposed_conv2_backward",
            detail: format!("grad {} vs output {out_shape}", grad_out.shape()),
        });
    }
    let s = input.shape();
    let (h, w) = (s.h(), s.w());
    let hw = h * w;
    let c_in = s.c();
    let per_sample = par::map_indexed(s.n(), |n| {
        let gy = grad_out.sample(n);
        let mut gcols = vec![T::zero(); c_out * 4 * hw];
        let w2 = 2 * w;
        let mut gb = vec![T::zero(); if has_bias { c_out } else { 0 }];
        for o in 0..c_out {
            let go = &gy[o * 4 * hw..(o + 1) * 4 * hw];
            if has_bias {
                gb[o] = go.iter().copied().sum();
            }
            for d in 0..4 {
                let (dy, dx) = (d / 2, d % 2);
                let dst = &mut gcols[(o * 4 + d) * hw..(o * 4 + d + 1) * hw];
                for iy in 0..h {
                    for ix in 0..w {
                        dst[iy * w + ix] = go[(2 * iy + dy) * w2 + 2 * ix + dx];
                    }
                }
            }
        }
        let mut gx = vec![T::zero(); c_in * hw];
        matmul(
            MatRef::new(weight.data(), c_in, c_out * 4),
            MatRef::new(&gcols, c_out * 4, hw),
            &mut gx,
            false,
        );
        let mut gw = vec![T::zero(); c_in * c_out * 4];
        matmul(
            MatRef::new(input.sample(n), c_in, hw),
            MatRef::new(&gcols, c_out * 4, hw).t(),
            &mut gw,
            false,
        );
        (gx, gw, gb)
    });
    let mut gin = Vec::with_capacity(s.len());
    let mut gws = Vec::new();
    let mut gbs = Vec::new();
    for (gx, gw, gb) in per_sample {
        gin.extend(gx);
        gws.push(gw);
        gbs.push(gb);
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(s, gin)?,
        weight: Tensor::from_vec(weight.shape(), sum_in_order(gws.into_iter(), weight.len()))?,
        bias: if has_bias {
            Some(Tensor::from_vec(
                Shape::new(c_out, 1, 1, 1),
                sum_in_order(gbs.into_iter(), c_out),
            )?)
        } else {
            None
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_kernel_counts_neighbours() {
        let x = Tensor::<f32>::full(Shape::new(1, 1, 3, 3), 1.0);
        let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let y = conv2d(&x, &w, None, &ConvSpec::same3x3(1, false)).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let x = Tensor::<f32>::from_fn(Shape::new(2, 1, 3, 4), |i| i as f32 * 0.5 - 2.0);
        let w = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
        let y = conv2d(&x, &w, None, &ConvSpec::pointwise(1, false)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn same_padding_preserves_extent() {
        let x = Tensor::<f32>::zeros(Shape::new(2, 3, 64, 64));
        let w = Tensor::zeros(Shape::new(32, 3, 3, 3));
        let y = conv2d(&x, &w, None, &ConvSpec::same3x3(32, false)).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 32, 64, 64));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::zeros(Shape::new(4, 3, 3, 3));
        assert!(matches!(
            conv2d(&x, &w, None, &ConvSpec::same3x3(4, false)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn spec_invariants() {
        let mut s = ConvSpec::same3x3(4, true);
        s.stride = 2;
        assert!(s.validate().is_err());
        let mut p = ConvSpec::pointwise(4, true);
        p.padding = 1;
        assert!(p.validate().is_err());
        p.padding = 0;
        p.stride = 2;
        assert!(p.validate().is_ok());
        assert_eq!(p.output_extent(5), Some(3));
    }

    #[test]
    fn strided_pointwise_subsamples() {
        let x = Tensor::<f32>::from_fn(Shape::new(1, 1, 4, 4), |i| i as f32);
        let w = Tensor::full(Shape::new(1, 1, 1, 1), 2.0);
        let mut spec = ConvSpec::pointwise(1, false);
        spec.stride = 2;
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.data(), &[0.0, 4.0, 16.0, 20.0]);
    }

    #[test]
    fn transposed_conv_places_kernel_per_pixel() {
        let x = Tensor::<f32>::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::full(Shape::new(1, 1, 1, 1), 0.5);
        let y = transposed_conv2(&x, Some(&w), Some(&b)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 4));
        assert_eq!(y.data(), &[1.5, 2.5, 2.5, 4.5, 3.5, 4.5, 6.5, 8.5]);
    }

    #[test]
    fn transposed_conv_requires_weight() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        assert_eq!(
            transposed_conv2(&x, None, None).unwrap_err(),
            Error::MissingWeight("transposed_conv2")
        );
    }
}
