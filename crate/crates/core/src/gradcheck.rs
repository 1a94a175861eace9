//! Central-difference gradient checking.
//!
//! Everything here runs in `f64`: the kernels are generic, so the checked code
//! path is the same one the `f32` models use, minus the rounding noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::ModelGraph;
use crate::tensor::{
    batch_norm, batch_norm_backward, concat_channels, concat_channels_backward, conv2d,
    conv2d_backward, relu, relu_backward, resample, resample_backward, softmax_cross_entropy,
    BnMode, BnState, ConvSpec, ResampleMode, Tensor,
};

/// A scalar function of several tensors with an analytic gradient.
pub trait Objective {
    fn value(&self, inputs: &[Tensor<f64>]) -> Result<f64>;
    fn gradient(&self, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>;
}

/// A tensor-valued operation with a vector-Jacobian product.
pub trait TensorOp {
    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>>;
    fn backward(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>>;
}

/// Reduces a [`TensorOp`] to a scalar by a fixed random projection `Σ r·op(x)`.
pub struct Projected<O> {
    pub op: O,
    pub weights: Tensor<f64>,
}

impl<O: TensorOp> Projected<O> {
    pub fn new(op: O, inputs: &[Tensor<f64>], seed: u64) -> Result<Self> {
        let shape = op.forward(inputs)?.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let weights = Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
        Ok(Self { op, weights })
    }
}

impl<O: TensorOp> Objective for Projected<O> {
    fn value(&self, inputs: &[Tensor<f64>]) -> Result<f64> {
        let y = self.op.forward(inputs)?;
        Ok(y.data().iter().zip(self.weights.data()).map(|(a, b)| a * b).sum())
    }

    fn gradient(&self, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
        self.op.backward(inputs, &self.weights)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the analytic gradient with `(f(x+ε) − f(x−ε)) / 2ε` for every
/// element of every input.
pub fn grad_check(obj: &dyn Objective, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport> {
    let analytic = obj.gradient(inputs)?;
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    for (ti, grad) in analytic.iter().enumerate() {
        for e in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[e];
            work[ti].data_mut()[e] = orig + eps;
            let plus = obj.value(&work)?;
            work[ti].data_mut()[e] = orig - eps;
            let minus = obj.value(&work)?;
            work[ti].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[e];
            let err = relative_error(a, numeric);
            if err > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: err,
                    worst: (ti, e),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

/// Inputs: `[x, weight]` or `[x, weight, bias]`.
pub struct Conv2dOp(pub ConvSpec);

impl TensorOp for Conv2dOp {
    fn forward(&self, i: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        conv2d(&i[0], &i[1], i.get(2), &self.0)
    }
    fn backward(&self, i: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let gr = conv2d_backward(&i[0], &i[1], &self.0, g)?;
        let mut out = vec![gr.input, gr.weight];
        out.extend(gr.bias);
        Ok(out)
    }
}

/// Train-mode batch norm. Inputs: `[x, gamma, beta]`.
pub struct BatchNormOp;

impl TensorOp for BatchNormOp {
    fn forward(&self, i: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        let st = BnState::new(i[0].shape().c());
        Ok(batch_norm(&i[0], &i[1], &i[2], &st, BnMode::Train)?.0)
    }
    fn backward(&self, i: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let st = BnState::new(i[0].shape().c());
        let (_, cache) = batch_norm(&i[0], &i[1], &i[2], &st, BnMode::Train)?;
        let (gx, gg, gb) = batch_norm_backward(&cache, &i[1], g)?;
        Ok(vec![gx, gg, gb])
    }
}

pub struct ReluOp;

impl TensorOp for ReluOp {
    fn forward(&self, i: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(relu(&i[0]))
    }
    fn backward(&self, i: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        Ok(vec![relu_backward(&i[0], g)?])
    }
}

/// Any [`ResampleMode`]. Inputs: `[x]`, or `[x, weight]` / `[x, weight, bias]`
/// for the transposed mode.
pub struct ResampleOp {
    pub mode: ResampleMode,
    pub factor_log2: usize,
}

impl TensorOp for ResampleOp {
    fn forward(&self, i: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(resample(&i[0], self.mode, self.factor_log2, i.get(1), i.get(2))?.0)
    }
    fn backward(&self, i: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let (_, cache) = resample(&i[0], self.mode, self.factor_log2, i.get(1), i.get(2))?;
        let gr = resample_backward(&cache, &i[0], i.get(1), i.len() > 2, g)?;
        let mut out = vec![gr.input];
        if self.mode == ResampleMode::TransposedConv2 {
            out.push(gr.weight);
            out.extend(gr.bias);
        }
        Ok(out)
    }
}

pub struct ConcatOp;

impl TensorOp for ConcatOp {
    fn forward(&self, i: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        concat_channels(&i.iter().collect::<Vec<_>>())
    }
    fn backward(&self, i: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let sizes: Vec<usize> = i.iter().map(|t| t.shape().c()).collect();
        concat_channels_backward(g, &sizes)
    }
}

/// Cross-entropy against fixed labels. Inputs: `[logits]`.
pub struct CrossEntropyObjective {
    pub labels: Vec<u8>,
}

impl Objective for CrossEntropyObjective {
    fn value(&self, i: &[Tensor<f64>]) -> Result<f64> {
        Ok(softmax_cross_entropy(&i[0], &self.labels)?.loss)
    }
    fn gradient(&self, i: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
        Ok(vec![softmax_cross_entropy(&i[0], &self.labels)?.grad])
    }
}

/// Training-mode cross-entropy of a whole model. Inputs: `[x, params...]` in
/// the graph's parameter order.
pub struct ModelLossObjective {
    pub graph: ModelGraph<f64>,
    pub labels: Vec<u8>,
}

impl ModelLossObjective {
    /// `[x]` followed by the graph's current parameter values.
    pub fn inputs(&self, x: Tensor<f64>) -> Vec<Tensor<f64>> {
        std::iter::once(x)
            .chain(self.graph.params().iter().map(|p| p.tensor.clone()))
            .collect()
    }

    fn with_params(&self, i: &[Tensor<f64>]) -> ModelGraph<f64> {
        let mut g = self.graph.clone();
        for (p, t) in g.params_mut().iter_mut().zip(&i[1..]) {
            p.tensor.data_mut().copy_from_slice(t.data());
        }
        g
    }
}

impl Objective for ModelLossObjective {
    fn value(&self, i: &[Tensor<f64>]) -> Result<f64> {
        let g = self.with_params(i);
        let tape = g.run(&i[0], BnMode::Train)?;
        Ok(softmax_cross_entropy(tape.output(), &self.labels)?.loss)
    }

    fn gradient(&self, i: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
        let mut g = self.with_params(i);
        let tape = g.run(&i[0], BnMode::Train)?;
        let loss = softmax_cross_entropy(tape.output(), &self.labels)?;
        g.zero_grads();
        let gx = g.backward(&tape, &loss.grad)?;
        let mut out = vec![gx];
        for p in g.params() {
            let mut t = Tensor::zeros(p.tensor.shape());
            if let Some(gr) = p.tensor.grad() {
                t.data_mut().copy_from_slice(gr);
            }
            out.push(t);
        }
        Ok(out)
    }
}
