use crate::error::{Error, Result};
use crate::real::Real;

use super::{Shape, Tensor};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Running per-channel statistics (non-learned state).
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T = f32> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> BnState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// `running = momentum·running + (1 − momentum)·batch`, unbiased batch variance.
    pub fn update(&mut self, cache: &BatchNormCache<T>) {
        if cache.mode != BnMode::Train {
            return;
        }
        let m = T::from_f64_lossy(BN_MOMENTUM);
        let one_m = T::one() - m;
        for c in 0..self.channels() {
            self.running_mean[c] = m * self.running_mean[c] + one_m * cache.batch_mean[c];
            self.running_var[c] = m * self.running_var[c] + one_m * cache.batch_var_unbiased[c];
        }
    }

    pub fn cast<U: Real>(&self) -> BnState<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect();
        BnState {
            running_mean: conv(&self.running_mean),
            running_var: conv(&self.running_var),
        }
    }
}

/// Values retained from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T = f32> {
    pub mode: BnMode,
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var_unbiased: Vec<T>,
}

fn check<T: Real>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, state: &BnState<T>) -> Result<()> {
    let c = input.shape().c();
    if gamma.len() != c || beta.len() != c || state.channels() != c {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            detail: format!(
                "input has {c} channels; gamma {}, beta {}, state {}",
                gamma.len(),
                beta.len(),
                state.channels()
            ),
        });
    }
    Ok(())
}

/// Per-channel normalisation over (N, H, W). Does not touch `state`; call
/// [`BnState::update`] with the returned cache to advance the running stats.
pub fn batch_norm<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &BnState<T>,
    mode: BnMode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    check(input, gamma, beta, state)?;
    let s = input.shape();
    let (n, c, plane) = (s.n(), s.c(), s.plane());
    let count = n * plane;
    if mode == BnMode::Train && count <= 1 {
        return Err(Error::DegenerateBatch);
    }
    let x = input.data();
    let mut mean = vec![T::zero(); c];
    let mut var_u = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let (mu, var) = match mode {
            BnMode::Train => {
                let mut sum = 0.0f64;
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    sum += x[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mu = sum / count as f64;
                let mut sq = 0.0f64;
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    sq += x[off..off + plane]
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - mu;
                            d * d
                        })
                        .sum::<f64>();
                }
                let var = sq / count as f64;
                var_u[ch] = T::from_f64_lossy(sq / (count - 1) as f64);
                (mu, var)
            }
            BnMode::Infer => (
                state.running_mean[ch].as_f64(),
                state.running_var[ch].as_f64(),
            ),
        };
        mean[ch] = T::from_f64_lossy(mu);
        inv_std[ch] = T::from_f64_lossy(1.0 / (var + BN_EPSILON).sqrt());
    }

    let mut normalized = vec![T::zero(); s.len()];
    let mut out = Tensor::zeros(s);
    let y = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (mu, is, g, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in off..off + plane {
                let xh = (x[i] - mu) * is;
                normalized[i] = xh;
                y[i] = g * xh + bt;
            }
        }
    }
    Ok((
        out,
        BatchNormCache {
            mode,
            normalized,
            inv_std,
            batch_mean: mean,
            batch_var_unbiased: var_u,
        },
    ))
}

/// Returns gradients for (input, gamma, beta).
pub fn batch_norm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let s = grad_out.shape();
    let (n, c, plane) = (s.n(), s.c(), s.plane());
    if cache.normalized.len() != s.len() || gamma.len() != c {
        return Err(Error::ShapeMismatch {
            op: "batch_norm_backward",
            detail: format!("grad {s} does not match the cached forward"),
        });
    }
    let count = (n * plane) as f64;
    let gy = grad_out.data();
    let xh = &cache.normalized;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut gx = vec![T::zero(); s.len()];
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xh = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                sum_dy += gy[i].as_f64();
                sum_dy_xh += gy[i].as_f64() * xh[i].as_f64();
            }
        }
        dgamma[ch] = T::from_f64_lossy(sum_dy_xh);
        dbeta[ch] = T::from_f64_lossy(sum_dy);
        let scale = gamma.data()[ch].as_f64() * cache.inv_std[ch].as_f64();
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let g = match cache.mode {
                    BnMode::Train => {
                        scale / count
                            * (count * gy[i].as_f64() - sum_dy - xh[i].as_f64() * sum_dy_xh)
                    }
                    BnMode::Infer => scale * gy[i].as_f64(),
                };
                gx[i] = T::from_f64_lossy(g);
            }
        }
    }
    let vs = Shape::new(c, 1, 1, 1);
    Ok((
        Tensor::from_vec(s, gx)?,
        Tensor::from_vec(vs, dgamma)?,
        Tensor::from_vec(vs, dbeta)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(c: usize, g: f32, b: f32) -> (Tensor<f32>, Tensor<f32>) {
        (
            Tensor::full(Shape::new(c, 1, 1, 1), g),
            Tensor::full(Shape::new(c, 1, 1, 1), b),
        )
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::full(Shape::new(2, 1, 3, 3), 7.0f32);
        let (g, b) = affine(1, 1.0, 0.5);
        let (y, _) = batch_norm(&x, &g, &b, &BnState::new(1), BnMode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn symmetric_pair_normalises_to_unit() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![-1.0f32, 1.0, -1.0, 1.0]).unwrap();
        let (g, b) = affine(1, 1.0, 0.0);
        let (y, _) = batch_norm(&x, &g, &b, &BnState::new(1), BnMode::Train).unwrap();
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (v, s) in y.data().iter().zip([-1.0, 1.0, -1.0, 1.0]) {
            assert!((*v as f64 - s * expected).abs() < 1e-6, "{v}");
        }
        assert!((expected - 0.999995).abs() < 1e-6);
    }

    #[test]
    fn infer_uses_running_stats() {
        let x = Tensor::full(Shape::new(1, 1, 1, 1), 4.0f32);
        let (g, b) = affine(1, 1.0, 0.0);
        let state = BnState {
            running_mean: vec![2.0],
            running_var: vec![4.0],
        };
        let (y, _) = batch_norm(&x, &g, &b, &state, BnMode::Infer).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn single_value_batch_rejected_in_train_mode() {
        let x = Tensor::full(Shape::new(1, 2, 1, 1), 1.0f32);
        let (g, b) = affine(2, 1.0, 0.0);
        assert_eq!(
            batch_norm(&x, &g, &b, &BnState::new(2), BnMode::Train).unwrap_err(),
            Error::DegenerateBatch
        );
        assert!(batch_norm(&x, &g, &b, &BnState::new(2), BnMode::Infer).is_ok());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor::full(Shape::new(1, 3, 2, 2), 1.0f32);
        let (g, b) = affine(2, 1.0, 0.0);
        assert!(batch_norm(&x, &g, &b, &BnState::new(2), BnMode::Train).is_err());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0f32, 3.0]).unwrap();
        let (g, b) = affine(1, 1.0, 0.0);
        let mut st = BnState::new(1);
        let (_, cache) = batch_norm(&x, &g, &b, &st, BnMode::Train).unwrap();
        st.update(&cache);
        assert!((st.running_mean[0] - 0.2).abs() < 1e-6);
        // unbiased variance of {1, 3} is 2
        assert!((st.running_var[0] - (0.9 + 0.2)).abs() < 1e-6);
    }
}
