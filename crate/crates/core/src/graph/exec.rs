use super::{ModelGraph, OpKind};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{
    batch_norm, batch_norm_backward, concat_channels, concat_channels_backward, conv2d,
    conv2d_backward, relu, relu_backward, resample, resample_backward, BatchNormCache, BnMode,
    ResampleCache, Tensor,
};

#[derive(Debug, Clone)]
enum NodeCache<T> {
    None,
    Bn(BatchNormCache<T>),
    Resample(ResampleCache),
}

/// Node outputs and per-node caches from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T = f32> {
    pub mode: BnMode,
    values: Vec<Tensor<T>>,
    caches: Vec<NodeCache<T>>,
}

impl<T: Real> Tape<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.values.last().expect("non-empty graph")
    }

    pub fn value(&self, node: usize) -> &Tensor<T> {
        &self.values[node]
    }
}

fn add_into<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b),
        None => *slot = Some(g),
    }
}

impl<T: Real> ModelGraph<T> {
    /// Evaluates every node in topological order. Running statistics are
    /// read, never written; see [`ModelGraph::forward`].
    pub fn run(&self, input: &Tensor<T>, mode: BnMode) -> Result<Tape<T>> {
        self.shape_infer(input.shape())?;
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        let mut caches = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let wrap = |e: Error| Error::Node {
                node: node.id,
                name: node.name.clone(),
                detail: e.to_string(),
            };
            let parent = |k: usize| &values[node.parents[k]];
            let (out, cache) = match &node.op {
                OpKind::Input => (input.clone(), NodeCache::None),
                OpKind::Output => (parent(0).clone(), NodeCache::None),
                OpKind::Relu => (relu(parent(0)), NodeCache::None),
                OpKind::Conv { spec, weight, bias } => {
                    let w = &self.params[*weight].tensor;
                    let b = bias.map(|b| &self.params[b].tensor);
                    (conv2d(parent(0), w, b, spec).map_err(wrap)?, NodeCache::None)
                }
                OpKind::BatchNorm { gamma, beta, state } => {
                    let (y, c) = batch_norm(
                        parent(0),
                        &self.params[*gamma].tensor,
                        &self.params[*beta].tensor,
                        &self.bn_states[*state].1,
                        mode,
                    )
                    .map_err(wrap)?;
                    (y, NodeCache::Bn(c))
                }
                OpKind::Resample {
                    mode: rm,
                    factor_log2,
                    weight,
                    bias,
                } => {
                    let w = weight.map(|w| &self.params[w].tensor);
                    let b = bias.map(|b| &self.params[b].tensor);
                    let (y, c) = resample(parent(0), *rm, *factor_log2, w, b).map_err(wrap)?;
                    (y, NodeCache::Resample(c))
                }
                OpKind::Concat => {
                    let parts: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &values[p]).collect();
                    (concat_channels(&parts).map_err(wrap)?, NodeCache::None)
                }
            };
            values.push(out);
            caches.push(cache);
        }
        let out = values.last().expect("graph has an output");
        if !out.all_finite() {
            return Err(Error::NonFinite("forward"));
        }
        Ok(Tape {
            mode,
            values,
            caches,
        })
    }

    /// Folds the batch statistics of a train-mode tape into the running stats.
    pub fn commit_running_stats(&mut self, tape: &Tape<T>) {
        if tape.mode != BnMode::Train {
            return;
        }
        for (node, cache) in self.nodes.iter().zip(&tape.caches) {
            if let (OpKind::BatchNorm { state, .. }, NodeCache::Bn(c)) = (&node.op, cache) {
                self.bn_states[*state].1.update(c);
            }
        }
    }

    /// Forward pass; in train mode the running statistics are updated.
    pub fn forward(&mut self, input: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let tape = self.run(input, mode)?;
        self.commit_running_stats(&tape);
        Ok(tape.values.into_iter().last().expect("graph has an output"))
    }

    /// Inference-mode forward pass.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self
            .run(input, BnMode::Infer)?
            .values
            .into_iter()
            .last()
            .expect("graph has an output"))
    }

    /// Back-propagates `grad_output` through the taped pass, accumulating
    /// into each parameter's gradient slot. Returns the input gradient.
    pub fn backward(&mut self, tape: &Tape<T>, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
        if grad_output.shape() != tape.output().shape() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("grad {} vs output {}", grad_output.shape(), tape.output().shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[self.output_node()] = Some(grad_output.clone());
        let mut input_grad = None;
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let wrap = |e: Error| Error::Node {
                node: node.id,
                name: node.name.clone(),
                detail: e.to_string(),
            };
            let parent_value = |k: usize| &tape.values[node.parents[k]];
            match &node.op {
                OpKind::Input => input_grad = Some(g),
                OpKind::Output => add_into(&mut grads[node.parents[0]], g),
                OpKind::Relu => {
                    let gx = relu_backward(parent_value(0), &g).map_err(wrap)?;
                    add_into(&mut grads[node.parents[0]], gx);
                }
                OpKind::Conv { spec, weight, bias } => {
                    let gr = conv2d_backward(parent_value(0), &self.params[*weight].tensor, spec, &g)
                        .map_err(wrap)?;
                    accumulate(&mut self.params[*weight].tensor, &gr.weight);
                    if let (Some(b), Some(gb)) = (bias, &gr.bias) {
                        accumulate(&mut self.params[*b].tensor, gb);
                    }
                    add_into(&mut grads[node.parents[0]], gr.input);
                }
                OpKind::BatchNorm { gamma, beta, .. } => {
                    let NodeCache::Bn(cache) = &tape.caches[id] else {
                        return Err(wrap(Error::InvalidConfig("missing batch-norm cache".into())));
                    };
                    let (gx, gg, gb) =
                        batch_norm_backward(cache, &self.params[*gamma].tensor, &g).map_err(wrap)?;
                    accumulate(&mut self.params[*gamma].tensor, &gg);
                    accumulate(&mut self.params[*beta].tensor, &gb);
                    add_into(&mut grads[node.parents[0]], gx);
                }
                OpKind::Resample { weight, bias, .. } => {
                    let NodeCache::Resample(cache) = &tape.caches[id] else {
                        return Err(wrap(Error::InvalidConfig("missing resample cache".into())));
                    };
                    let w = weight.map(|w| &self.params[w].tensor);
                    let gr = resample_backward(cache, parent_value(0), w, bias.is_some(), &g)
                        .map_err(wrap)?;
                    if let Some(w) = weight {
                        accumulate(&mut self.params[*w].tensor, &gr.weight);
                    }
                    if let (Some(b), Some(gb)) = (bias, &gr.bias) {
                        accumulate(&mut self.params[*b].tensor, gb);
                    }
                    add_into(&mut grads[node.parents[0]], gr.input);
                }
                OpKind::Concat => {
                    let sizes: Vec<usize> =
                        node.parents.iter().map(|&p| tape.values[p].shape().c()).collect();
                    let parts = concat_channels_backward(&g, &sizes).map_err(wrap)?;
                    for (&p, part) in node.parents.iter().zip(parts) {
                        add_into(&mut grads[p], part);
                    }
                }
            }
        }
        input_grad.ok_or_else(|| Error::InvalidConfig("input is disconnected from output".into()))
    }
}

fn accumulate<T: Real>(param: &mut Tensor<T>, g: &Tensor<T>) {
    param
        .grad_mut()
        .iter_mut()
        .zip(g.data())
        .for_each(|(a, b)| *a += *b);
}
