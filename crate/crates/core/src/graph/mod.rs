//! Computation graphs for the U-Net family.
//!
//! A [`ModelGraph`] is a topologically ordered list of nodes plus the
//! parameters and batch-norm state they reference. Graphs are produced by
//! [`GraphBuilder`] from an [`ArchConfig`] and are structurally immutable.

mod builder;
mod config;
mod dot;
mod exec;

pub use builder::{
    add_dense_cross, add_dense_decoder, add_dense_encoder, build, build_mdunet, build_unet,
    GraphBuilder,
};
pub use config::{ArchConfig, CrossMode, DenseDegree, UpsampleMode};
pub use dot::export_dot;
pub use exec::Tape;

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{BnState, ConvSpec, Parameter, ResampleMode, Shape};

pub type NodeId = usize;
pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Input,
    Encoder,
    Decoder,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Level {
    pub side: Side,
    pub index: usize,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.side {
            Side::Input => write!(f, "input"),
            Side::Encoder => write!(f, "enc{}", self.index),
            Side::Decoder => write!(f, "dec{}", self.index),
            Side::Head => write!(f, "head"),
        }
    }
}

/// Which part of the architecture a node or parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Baseline,
    DenseEncoder,
    DenseDecoder,
    Cross,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Input,
    Conv {
        spec: ConvSpec,
        weight: ParamId,
        bias: Option<ParamId>,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        state: usize,
    },
    Relu,
    Resample {
        mode: ResampleMode,
        factor_log2: usize,
        weight: Option<ParamId>,
        bias: Option<ParamId>,
    },
    Concat,
    Output,
}

impl OpKind {
    pub fn label(&self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Conv { spec, .. } if spec.kernel == 1 => "conv1x1",
            OpKind::Conv { .. } => "conv3x3",
            OpKind::BatchNorm { .. } => "batch_norm",
            OpKind::Relu => "relu",
            OpKind::Resample { mode, .. } => match mode {
                ResampleMode::MaxPool2 => "maxpool2",
                ResampleMode::NearestUp2 => "nearest_up2",
                ResampleMode::TransposedConv2 => "transposed_conv2",
            },
            OpKind::Concat => "concat",
            OpKind::Output => "output",
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            OpKind::Conv { weight, bias, .. } => std::iter::once(*weight).chain(*bias).collect(),
            OpKind::BatchNorm { gamma, beta, .. } => vec![*gamma, *beta],
            OpKind::Resample { weight, bias, .. } => weight.iter().chain(bias).copied().collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub id: NodeId,
    /// Stable hierarchical name, e.g. `enc3.dense.h1.conv`.
    pub name: String,
    pub op: OpKind,
    pub parents: Vec<NodeId>,
    pub level: Level,
    pub family: Family,
}

#[derive(Debug, Clone)]
pub struct ModelGraph<T = f32> {
    pub(crate) nodes: Vec<GraphNode>,
    pub(crate) params: Vec<Parameter<T>>,
    pub(crate) param_family: Vec<Family>,
    pub(crate) bn_states: Vec<(String, BnState<T>)>,
    pub(crate) config: ArchConfig,
    pub(crate) seed: u64,
}

/// Parameter totals, split by architectural family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamCount {
    pub total: usize,
    pub baseline: usize,
    pub dense_encoder: usize,
    pub dense_decoder: usize,
    pub cross: usize,
}

impl ParamCount {
    /// Everything beyond the baseline network.
    pub fn increment(&self) -> usize {
        self.dense_encoder + self.dense_decoder + self.cross
    }
}

impl<T: Real> ModelGraph<T> {
    pub fn config(&self) -> &ArchConfig {
        &self.config
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }
    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }
    pub fn param_family(&self, id: ParamId) -> Family {
        self.param_family[id]
    }
    pub fn bn_states(&self) -> &[(String, BnState<T>)] {
        &self.bn_states
    }
    pub fn bn_states_mut(&mut self) -> &mut [(String, BnState<T>)] {
        &mut self.bn_states
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn input_node(&self) -> NodeId {
        0
    }

    pub fn output_node(&self) -> NodeId {
        self.nodes.len() - 1
    }

    pub fn edge_count(&self) -> usize {
        self.nodes.iter().map(|n| n.parents.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.clear_grad());
    }

    pub fn cast<U: Real>(&self) -> ModelGraph<U> {
        ModelGraph {
            nodes: self.nodes.clone(),
            params: self.params.iter().map(Parameter::cast).collect(),
            param_family: self.param_family.clone(),
            bn_states: self
                .bn_states
                .iter()
                .map(|(n, s)| (n.clone(), s.cast()))
                .collect(),
            config: self.config.clone(),
            seed: self.seed,
        }
    }

    /// Copies values, masks and running statistics for every parameter or
    /// state name that exists in `other` with the same size. Returns how many
    /// tensors were copied.
    pub fn copy_matching_from(&mut self, other: &ModelGraph<T>) -> usize {
        let by_name: HashMap<&str, &Parameter<T>> =
            other.params.iter().map(|p| (p.name.as_str(), p)).collect();
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(src) = by_name.get(p.name.as_str()) {
                if src.tensor.shape() == p.tensor.shape() {
                    p.tensor = src.tensor.clone();
                    p.tensor.clear_grad();
                    p.frozen_mask = src.frozen_mask.clone();
                    copied += 1;
                }
            }
        }
        let states: HashMap<&str, &BnState<T>> =
            other.bn_states.iter().map(|(n, s)| (n.as_str(), s)).collect();
        for (name, st) in &mut self.bn_states {
            if let Some(src) = states.get(name.as_str()) {
                if src.channels() == st.channels() {
                    *st = (*src).clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Structural invariants: parents precede children, one input node
    /// first, one output node last, every parameter used by exactly one node.
    pub fn validate(&self) -> Result<()> {
        let fail = |node: &GraphNode, detail: &str| Error::Node {
            node: node.id,
            name: node.name.clone(),
            detail: detail.to_string(),
        };
        let mut uses = vec![0usize; self.params.len()];
        let mut inputs = 0;
        let mut outputs = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return Err(fail(node, "id does not match position"));
            }
            if node.parents.iter().any(|&p| p >= i) {
                return Err(fail(node, "parent does not precede node"));
            }
            match node.op {
                OpKind::Input => inputs += 1,
                OpKind::Output => outputs += 1,
                _ => {}
            }
            for p in node.op.params() {
                uses[p] += 1;
            }
        }
        let first = &self.nodes[0];
        let last = &self.nodes[self.nodes.len() - 1];
        if inputs != 1 || first.op != OpKind::Input {
            return Err(fail(first, "graph must start with its single input node"));
        }
        if outputs != 1 || last.op != OpKind::Output {
            return Err(fail(last, "graph must end with its single output node"));
        }
        if let Some(p) = uses.iter().position(|&u| u != 1) {
            return Err(Error::InvalidConfig(format!(
                "parameter {} is referenced {} times",
                self.params[p].name, uses[p]
            )));
        }
        Ok(())
    }

    /// Output shape of every node for the given input shape.
    pub fn shape_infer(&self, input: Shape) -> Result<Vec<Shape>> {
        let cfg = &self.config;
        let div = 1usize << (cfg.depth - 1);
        for extent in [input.h(), input.w()] {
            if extent == 0 || extent % div != 0 {
                return Err(Error::Indivisible {
                    op: "shape_infer",
                    extent,
                    divisor: div,
                });
            }
        }
        if input.c() != cfg.input_channels || input.n() == 0 {
            return Err(Error::ShapeMismatch {
                op: "shape_infer",
                detail: format!("input {input} but the model takes {} channels", cfg.input_channels),
            });
        }
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let err = |detail: String| Error::Node {
                node: node.id,
                name: node.name.clone(),
                detail,
            };
            let parent = |k: usize| shapes[node.parents[k]];
            let s = match &node.op {
                OpKind::Input => input,
                OpKind::Output | OpKind::Relu => parent(0),
                OpKind::Conv { spec, weight, .. } => {
                    let p = parent(0);
                    let ws = self.params[*weight].tensor.shape();
                    if ws != spec.weight_shape(p.c()) {
                        return Err(err(format!("weight {ws} does not fit input {p}")));
                    }
                    spec.output_shape(p).map_err(|e| err(e.to_string()))?
                }
                OpKind::BatchNorm { gamma, state, .. } => {
                    let p = parent(0);
                    if self.params[*gamma].len() != p.c()
                        || self.bn_states[*state].1.channels() != p.c()
                    {
                        return Err(err(format!("channel count differs from input {p}")));
                    }
                    p
                }
                OpKind::Resample {
                    mode,
                    factor_log2,
                    weight,
                    ..
                } => {
                    let p = parent(0);
                    let f = 1usize << factor_log2;
                    match mode {
                        ResampleMode::MaxPool2 => {
                            if p.h() % f != 0 || p.w() % f != 0 {
                                return Err(err(format!("{p} not divisible by {f}")));
                            }
                            Shape::new(p.n(), p.c(), p.h() / f, p.w() / f)
                        }
                        ResampleMode::NearestUp2 => Shape::new(p.n(), p.c(), p.h() * f, p.w() * f),
                        ResampleMode::TransposedConv2 => {
                            let w = weight.ok_or_else(|| err("missing weight".into()))?;
                            let ws = self.params[w].tensor.shape();
                            if ws.n() != p.c() {
                                return Err(err(format!("weight {ws} does not fit input {p}")));
                            }
                            Shape::new(p.n(), ws.c(), p.h() * 2, p.w() * 2)
                        }
                    }
                }
                OpKind::Concat => {
                    let first = parent(0);
                    let mut c = 0;
                    for k in 0..node.parents.len() {
                        let p = parent(k);
                        if (p.n(), p.h(), p.w()) != (first.n(), first.h(), first.w()) {
                            return Err(err(format!("{p} does not match {first}")));
                        }
                        c += p.c();
                    }
                    Shape::new(first.n(), c, first.h(), first.w())
                }
            };
            shapes.push(s);
        }
        let out = shapes[self.output_node()];
        let expected = Shape::new(input.n(), cfg.num_classes, input.h(), input.w());
        if out != expected {
            let node = &self.nodes[self.output_node()];
            return Err(Error::Node {
                node: node.id,
                name: node.name.clone(),
                detail: format!("output {out}, expected {expected}"),
            });
        }
        Ok(shapes)
    }

    pub fn param_count(&self) -> ParamCount {
        let mut c = ParamCount::default();
        for (p, fam) in self.params.iter().zip(&self.param_family) {
            let n = p.len();
            c.total += n;
            match fam {
                Family::Baseline => c.baseline += n,
                Family::DenseEncoder => c.dense_encoder += n,
                Family::DenseDecoder => c.dense_decoder += n,
                Family::Cross => c.cross += n,
            }
        }
        c
    }
}
