//! Plain SGD training with a step-decay learning rate.

use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::real::Real;
use crate::tensor::{softmax_cross_entropy, BnMode, Parameter, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Iterations at which the learning rate is divided by 10.
    pub lr_milestones: Vec<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    /// When set, training stops after this many iterations regardless of
    /// `epochs`, cycling through as many epochs as needed.
    pub iterations: Option<usize>,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.005,
            lr_milestones: Vec::new(),
            batch_size: 4,
            epochs: 1,
            iterations: None,
            seed: 0,
            loss: LossKind::CrossEntropy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("lr_milestones must be strictly ascending".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        lr_at(self.base_lr, &self.lr_milestones, iteration)
    }
}

/// `base · 10^(−m)` with `m` the number of milestones at or below `iteration`.
pub fn lr_at(base_lr: f64, milestones: &[usize], iteration: usize) -> f64 {
    let m = milestones.iter().filter(|&&t| t <= iteration).count();
    base_lr / 10f64.powi(m as i32)
}

/// `w ← w − lr·g` on unfrozen elements, then clears every gradient. Parameters
/// without a gradient are left alone.
pub fn sgd_step<T: Real>(params: &mut [Parameter<T>], lr: f64) -> Result<()> {
    for p in params.iter() {
        if let Some(g) = p.tensor.grad() {
            if g.len() != p.len() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    detail: format!("{}: gradient of {} for {} values", p.name, g.len(), p.len()),
                });
            }
        }
    }
    let lr = T::from_f64_lossy(lr);
    for p in params.iter_mut() {
        let Some(g) = p.tensor.grad().map(|g| g.to_vec()) else {
            continue;
        };
        let mask = std::mem::take(&mut p.frozen_mask);
        for ((w, g), frozen) in p.tensor.data_mut().iter_mut().zip(g).zip(&mask) {
            if !frozen {
                *w -= lr * g;
            }
        }
        p.frozen_mask = mask;
        p.tensor.clear_grad();
    }
    Ok(())
}

/// One image with its per-pixel class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Shape (1, C, H, W).
    pub image: Tensor<f32>,
    /// H·W labels, row-major.
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn new(image: Tensor<f32>, mask: Vec<u8>) -> Result<Self> {
        let s = image.shape();
        if s.n() != 1 || mask.len() != s.plane() {
            return Err(Error::ShapeMismatch {
                op: "sample",
                detail: format!("image {s} with {} mask pixels", mask.len()),
            });
        }
        Ok(Self { image, mask })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
}

impl Dataset {
    /// All samples must share one shape.
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let s = first.image.shape();
            if let Some(bad) = samples.iter().find(|x| x.image.shape() != s) {
                return Err(Error::ShapeMismatch {
                    op: "dataset",
                    detail: format!("{} next to {s}", bad.image.shape()),
                });
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_shape(&self) -> Option<Shape> {
        self.samples.first().map(|s| s.image.shape())
    }

    /// Stacks the given samples into one batch tensor and label vector.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<u8>)> {
        let s = self.image_shape().ok_or(Error::EmptyDataset)?;
        let mut data = Vec::with_capacity(indices.len() * s.sample_len());
        let mut labels = Vec::with_capacity(indices.len() * s.plane());
        for &i in indices {
            data.extend_from_slice(self.samples[i].image.data());
            labels.extend_from_slice(&self.samples[i].mask);
        }
        let t = Tensor::from_vec(Shape::new(indices.len(), s.c(), s.h(), s.w()), data)?;
        Ok((t, labels))
    }
}

/// Index batches for one epoch. A dataset smaller than the batch is cycled to
/// fill a single full batch; otherwise the last batch may be short.
pub fn epoch_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    if order.is_empty() {
        return Vec::new();
    }
    if order.len() < batch_size {
        return vec![order.iter().copied().cycle().take(batch_size).collect()];
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Called after every step; `Break` stops training.
pub type TrainHook<'a> = &'a mut dyn FnMut(&IterationRecord, &ModelGraph<f32>) -> ControlFlow<()>;

/// Trains `model` in place and returns the per-iteration history. The hook
/// runs after every step and may stop training early.
pub fn train_loop(
    model: &mut ModelGraph<f32>,
    dataset: &Dataset,
    config: &TrainConfig,
    mut hook: Option<TrainHook<'_>>,
) -> Result<Vec<IterationRecord>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let LossKind::CrossEntropy = config.loss;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::new();
    let budget = config.iterations;
    let mut epoch = 0;
    loop {
        if budget.is_none() && epoch >= config.epochs {
            break;
        }
        if budget == Some(history.len()) {
            break;
        }
        order.shuffle(&mut rng);
        for idx in epoch_batches(&order, config.batch_size) {
            let iteration = history.len();
            if budget == Some(iteration) {
                break;
            }
            let (x, labels) = dataset.batch(&idx)?;
            let diverged = |e| match e {
                Error::NonFinite(_) => Error::Diverged(iteration),
                e => e,
            };
            let tape = model.run(&x, BnMode::Train).map_err(diverged)?;
            let out = softmax_cross_entropy(tape.output(), &labels).map_err(diverged)?;
            if out.loss.is_nan() {
                return Err(Error::Diverged(iteration));
            }
            model.commit_running_stats(&tape);
            model.zero_grads();
            model.backward(&tape, &out.grad)?;
            let lr = config.lr_at(iteration);
            sgd_step(model.params_mut(), lr)?;
            let rec = IterationRecord {
                iteration,
                lr,
                loss: out.loss,
            };
            history.push(rec);
            if let Some(h) = hook.as_mut() {
                if h(&rec, model).is_break() {
                    return Ok(history);
                }
            }
        }
        epoch += 1;
    }
    Ok(history)
}
