use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ArchConfig, CrossMode, DenseDegree, UpsampleMode};
use super::{Family, GraphNode, Level, ModelGraph, NodeId, OpKind, ParamId, Side};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{glorot_uniform, BnState, ConvSpec, Parameter, ResampleMode, Shape, Tensor};

#[derive(Debug, Clone, Copy)]
struct NodeMeta {
    channels: usize,
    /// Resolution level: 1 is full input size, each level halves it.
    res: usize,
}

/// Incremental construction of a [`ModelGraph`]. Parameters are initialised
/// from a generator keyed by `(seed, parameter name)`, so the same name always
/// receives the same initial values regardless of what else is in the graph.
pub struct GraphBuilder<T = f32> {
    nodes: Vec<GraphNode>,
    meta: Vec<NodeMeta>,
    params: Vec<Parameter<T>>,
    param_family: Vec<Family>,
    bn_states: Vec<(String, BnState<T>)>,
    config: ArchConfig,
    seed: u64,
    family: Family,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl<T: Real> GraphBuilder<T> {
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Self {
            nodes: Vec::new(),
            meta: Vec::new(),
            params: Vec::new(),
            param_family: Vec::new(),
            bn_states: Vec::new(),
            seed,
            family: Family::Baseline,
            config,
        };
        let c = b.config.input_channels;
        b.push(
            "input",
            OpKind::Input,
            vec![],
            Level {
                side: Side::Input,
                index: 0,
            },
            c,
            1,
        );
        Ok(b)
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.meta[id].channels
    }

    pub fn resolution(&self, id: NodeId) -> usize {
        self.meta[id].res
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn param_elements(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Family attributed to nodes and parameters added from now on.
    pub fn set_family(&mut self, family: Family) {
        self.family = family;
    }

    fn push(
        &mut self,
        name: &str,
        op: OpKind,
        parents: Vec<NodeId>,
        level: Level,
        channels: usize,
        res: usize,
    ) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(GraphNode {
            id,
            name: name.to_string(),
            op,
            parents,
            level,
            family: self.family,
        });
        self.meta.push(NodeMeta { channels, res });
        id
    }

    fn add_param(&mut self, name: String, tensor: Tensor<T>) -> ParamId {
        self.params.push(Parameter::new(name, tensor));
        self.param_family.push(self.family);
        self.params.len() - 1
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name))
    }

    pub fn conv(&mut self, name: &str, src: NodeId, spec: ConvSpec, level: Level) -> NodeId {
        let c_in = self.channels(src);
        let k2 = spec.kernel * spec.kernel;
        let wname = format!("{name}.weight");
        let mut rng = self.rng_for(&wname);
        let w = glorot_uniform(spec.weight_shape(c_in), c_in * k2, spec.out_channels * k2, &mut rng);
        let weight = self.add_param(wname, w);
        let bias = spec.has_bias.then(|| {
            self.add_param(
                format!("{name}.bias"),
                Tensor::zeros(Shape::new(spec.out_channels, 1, 1, 1)),
            )
        });
        let res = self.resolution(src);
        self.push(
            name,
            OpKind::Conv { spec, weight, bias },
            vec![src],
            level,
            spec.out_channels,
            res,
        )
    }

    /// Batch norm followed by ReLU.
    pub fn bn_relu(&mut self, name: &str, src: NodeId, level: Level) -> NodeId {
        let c = self.channels(src);
        let res = self.resolution(src);
        let vs = Shape::new(c, 1, 1, 1);
        let bn_name = format!("{name}.bn");
        let gamma = self.add_param(format!("{bn_name}.gamma"), Tensor::full(vs, T::one()));
        let beta = self.add_param(format!("{bn_name}.beta"), Tensor::zeros(vs));
        self.bn_states.push((bn_name.clone(), BnState::new(c)));
        let state = self.bn_states.len() - 1;
        let bn = self.push(
            &bn_name,
            OpKind::BatchNorm { gamma, beta, state },
            vec![src],
            level,
            c,
            res,
        );
        self.push(&format!("{name}.relu"), OpKind::Relu, vec![bn], level, c, res)
    }

    /// Two rounds of conv3×3 → BN → ReLU.
    pub fn conv_block(&mut self, name: &str, src: NodeId, out_channels: usize, level: Level) -> NodeId {
        let mut cur = src;
        for i in 1..=2 {
            let conv_name = format!("{name}.conv{i}");
            cur = self.conv(&conv_name, cur, ConvSpec::same3x3(out_channels, true), level);
            cur = self.bn_relu(&conv_name, cur, level);
        }
        cur
    }

    /// Channel concatenation of `sources` followed by a 1×1 conv → BN → ReLU
    /// producing `target_channels`.
    pub fn fuse_h(
        &mut self,
        name: &str,
        sources: &[NodeId],
        target_channels: usize,
        level: Level,
    ) -> Result<NodeId> {
        let first = *sources.first().ok_or(Error::EmptyInput("fuse_h"))?;
        let res = self.resolution(first);
        if let Some(&bad) = sources.iter().find(|&&s| self.resolution(s) != res) {
            return Err(Error::ShapeMismatch {
                op: "fuse_h",
                detail: format!(
                    "source {} is at resolution level {} but {} is at {res}",
                    self.nodes[bad].name,
                    self.resolution(bad),
                    self.nodes[first].name
                ),
            });
        }
        let cat = if sources.len() == 1 {
            first
        } else {
            let c = sources.iter().map(|&s| self.channels(s)).sum();
            self.push(
                &format!("{name}.concat"),
                OpKind::Concat,
                sources.to_vec(),
                level,
                c,
                res,
            )
        };
        let conv_name = format!("{name}.conv");
        let conv = self.conv(&conv_name, cat, ConvSpec::pointwise(target_channels, true), level);
        Ok(self.bn_relu(&conv_name, conv, level))
    }

    /// Parameter-free rescaling of `src` to resolution level `target`: one
    /// maxpool2 stage per level down, one nearest_up2 stage per level up.
    pub fn rescale_to_level(&mut self, name: &str, src: NodeId, target: usize, level: Level) -> Result<NodeId> {
        let depth = self.config.depth;
        let from = self.resolution(src);
        if !(1..=depth).contains(&target) || !(1..=depth).contains(&from) {
            return Err(Error::InvalidConfig(format!(
                "rescale from level {from} to {target} outside 1..={depth}"
            )));
        }
        let c = self.channels(src);
        let mut cur = src;
        let mut res = from;
        let mut stage = 1;
        while res != target {
            let (mode, next, tag) = if res < target {
                (ResampleMode::MaxPool2, res + 1, "pool")
            } else {
                (ResampleMode::NearestUp2, res - 1, "up")
            };
            cur = self.push(
                &format!("{name}.{tag}{stage}"),
                OpKind::Resample {
                    mode,
                    factor_log2: 1,
                    weight: None,
                    bias: None,
                },
                vec![cur],
                level,
                c,
                next,
            );
            res = next;
            stage += 1;
        }
        Ok(cur)
    }

    /// Decoder main-path ×2 upsampling, U(). Transposed mode maps to
    /// `out_channels`; nearest mode keeps the channel count.
    pub fn upsample(&mut self, name: &str, src: NodeId, out_channels: usize, level: Level) -> NodeId {
        let res = self.resolution(src) - 1;
        match self.config.upsample_mode {
            UpsampleMode::NearestUp2 => {
                let c = self.channels(src);
                self.push(
                    name,
                    OpKind::Resample {
                        mode: ResampleMode::NearestUp2,
                        factor_log2: 1,
                        weight: None,
                        bias: None,
                    },
                    vec![src],
                    level,
                    c,
                    res,
                )
            }
            UpsampleMode::TransposedConv2 => {
                let c_in = self.channels(src);
                let wname = format!("{name}.weight");
                let mut rng = self.rng_for(&wname);
                let w = glorot_uniform(
                    Shape::new(c_in, out_channels, 2, 2),
                    c_in * 4,
                    out_channels * 4,
                    &mut rng,
                );
                let weight = self.add_param(wname, w);
                let bias = self.add_param(
                    format!("{name}.bias"),
                    Tensor::zeros(Shape::new(out_channels, 1, 1, 1)),
                );
                self.push(
                    name,
                    OpKind::Resample {
                        mode: ResampleMode::TransposedConv2,
                        factor_log2: 1,
                        weight: Some(weight),
                        bias: Some(bias),
                    },
                    vec![src],
                    level,
                    out_channels,
                    res,
                )
            }
        }
    }

    pub fn concat(&mut self, name: &str, sources: &[NodeId], level: Level) -> Result<NodeId> {
        let first = *sources.first().ok_or(Error::EmptyInput("concat"))?;
        let res = self.resolution(first);
        if sources.iter().any(|&s| self.resolution(s) != res) {
            return Err(Error::ShapeMismatch {
                op: "concat",
                detail: format!("{name}: sources at different resolutions"),
            });
        }
        let c = sources.iter().map(|&s| self.channels(s)).sum();
        Ok(self.push(name, OpKind::Concat, sources.to_vec(), level, c, res))
    }

    /// Adds the 1×1 classification head and the output node.
    pub fn finish(mut self, src: NodeId) -> Result<ModelGraph<T>> {
        let head = Level {
            side: Side::Head,
            index: 0,
        };
        self.family = Family::Baseline;
        let classes = self.config.num_classes;
        let logits = self.conv("head.conv", src, ConvSpec::pointwise(classes, true), head);
        let res = self.resolution(logits);
        self.push("output", OpKind::Output, vec![logits], head, classes, res);
        let graph = ModelGraph {
            nodes: self.nodes,
            params: self.params,
            param_family: self.param_family,
            bn_states: self.bn_states,
            config: self.config,
            seed: self.seed,
        };
        graph.validate()?;
        Ok(graph)
    }
}

fn enc(i: usize) -> Level {
    Level {
        side: Side::Encoder,
        index: i,
    }
}

fn dec(i: usize) -> Level {
    Level {
        side: Side::Decoder,
        index: i,
    }
}

/// Earlier levels a degree-`n` dense block at position `i` draws from:
/// `max(1, i-1-n) ..= i-2`, i.e. everything before the immediate predecessor.
pub(crate) fn dense_sources(i: usize, n: usize) -> Vec<usize> {
    if i < 3 || n == 0 {
        return Vec::new();
    }
    let lo = (i as isize - 1 - n as isize).max(1) as usize;
    (lo..=i - 2).collect()
}

/// Builds the network described by `config`: encoder dense blocks, then the
/// cross connections, then the decoder dense blocks.
pub fn build<T: Real>(config: &ArchConfig, seed: u64) -> Result<ModelGraph<T>> {
    let mut b = GraphBuilder::<T>::new(config.clone(), seed)?;
    let cfg = config.clone();
    let depth = cfg.depth;
    let ch = |l: usize| cfg.channels(l);

    // Encoder: X[l] is the output of the level-l block; X[depth] is the bottleneck.
    let mut x = vec![usize::MAX; depth + 1];
    x[1] = b.conv_block("enc1", b.input(), ch(1), enc(1));
    for i in 2..=depth {
        let mut main = b.rescale_to_level(&format!("enc{i}.down"), x[i - 1], i, enc(i))?;
        b.set_family(Family::DenseEncoder);
        let sources: Vec<(String, NodeId)> = match cfg.enc_dense {
            DenseDegree::Multi => vec![("from0".into(), b.input())],
            DenseDegree::Degree(n) => dense_sources(i, n)
                .into_iter()
                .map(|j| (format!("from{j}"), x[j]))
                .collect(),
        };
        if !sources.is_empty() {
            let mut rescaled = Vec::with_capacity(sources.len());
            for (tag, src) in sources {
                rescaled.push(b.rescale_to_level(&format!("enc{i}.dense.{tag}"), src, i, enc(i))?);
            }
            let target = b.channels(main);
            let xe = b.fuse_h(&format!("enc{i}.dense.h1"), &rescaled, target, enc(i))?;
            main = b.fuse_h(&format!("enc{i}.dense.h2"), &[xe, main], target, enc(i))?;
        }
        b.set_family(Family::Baseline);
        x[i] = b.conv_block(&format!("enc{i}"), main, ch(i), enc(i));
    }

    // Decoder: step k = 1 is the bottleneck, step k sits at level depth + 1 - k.
    let mut y = vec![usize::MAX; depth + 1];
    y[1] = x[depth];
    for k in 2..=depth {
        let l = depth + 1 - k;
        let yp = b.upsample(&format!("dec{l}.up"), y[k - 1], ch(l), dec(l));
        let yp_channels = b.channels(yp);
        let skip_channels = ch(l) + yp_channels;

        b.set_family(Family::Cross);
        let cross = if cfg.cross_mode == CrossMode::Skip {
            None
        } else {
            let mut srcs = Vec::new();
            for j in cfg.cross_mode.source_levels(l, depth) {
                srcs.push(b.rescale_to_level(&format!("dec{l}.cross.from{j}"), x[j], l, dec(l))?);
            }
            Some(b.fuse_h(&format!("dec{l}.cross.h1"), &srcs, ch(l), dec(l))?)
        };

        b.set_family(Family::DenseDecoder);
        let dense_steps: Vec<usize> = match cfg.dec_dense {
            DenseDegree::Multi if k == depth => (1..depth).collect(),
            DenseDegree::Multi => Vec::new(),
            DenseDegree::Degree(n) => dense_sources(k, n),
        };
        let ye = if dense_steps.is_empty() {
            None
        } else {
            let mut srcs = Vec::new();
            for kk in dense_steps {
                let from = depth + 1 - kk;
                srcs.push(b.rescale_to_level(&format!("dec{l}.dense.from{from}"), y[kk], l, dec(l))?);
            }
            Some(b.fuse_h(&format!("dec{l}.dense.h1"), &srcs, yp_channels, dec(l))?)
        };

        let merged = match (cross, ye) {
            (None, None) => {
                b.set_family(Family::Baseline);
                b.concat(&format!("dec{l}.skip"), &[x[l], yp], dec(l))?
            }
            (None, Some(ye)) => {
                let yp2 = b.fuse_h(&format!("dec{l}.dense.h2"), &[ye, yp], yp_channels, dec(l))?;
                b.set_family(Family::Baseline);
                b.concat(&format!("dec{l}.skip"), &[x[l], yp2], dec(l))?
            }
            (Some(xt), None) => {
                b.set_family(Family::Cross);
                b.fuse_h(&format!("dec{l}.cross.h2"), &[xt, yp], skip_channels, dec(l))?
            }
            (Some(xt), Some(ye)) => {
                let yee = b.fuse_h(&format!("dec{l}.dense.h2"), &[xt, ye], ch(l), dec(l))?;
                b.set_family(Family::Cross);
                b.fuse_h(&format!("dec{l}.cross.h2"), &[yp, yee], skip_channels, dec(l))?
            }
        };
        b.set_family(Family::Baseline);
        y[k] = b.conv_block(&format!("dec{l}"), merged, ch(l), dec(l));
    }
    b.finish(y[depth])
}

/// The plain U-Net on the backbone of `config` (dense settings ignored).
pub fn build_unet<T: Real>(config: &ArchConfig, seed: u64) -> Result<ModelGraph<T>> {
    build(&config.baseline(), seed)
}

fn rebuild_with<T: Real>(graph: &ModelGraph<T>, config: ArchConfig) -> Result<ModelGraph<T>> {
    let mut next = build(&config, graph.seed)?;
    next.copy_matching_from(graph);
    Ok(next)
}

fn check_degree(config: &ArchConfig, degree: DenseDegree) -> Result<()> {
    match degree {
        DenseDegree::Degree(n) if n > config.depth - 1 => Err(Error::InvalidConfig(format!(
            "dense degree {n} exceeds depth - 1 = {}",
            config.depth - 1
        ))),
        _ => Ok(()),
    }
}

/// Adds dense encoder connections of the given degree. Existing parameters
/// (matched by name) keep their current values.
pub fn add_dense_encoder<T: Real>(graph: &ModelGraph<T>, degree: DenseDegree) -> Result<ModelGraph<T>> {
    check_degree(&graph.config, degree)?;
    let mut cfg = graph.config.clone();
    cfg.enc_dense = degree;
    rebuild_with(graph, cfg)
}

pub fn add_dense_decoder<T: Real>(graph: &ModelGraph<T>, degree: DenseDegree) -> Result<ModelGraph<T>> {
    check_degree(&graph.config, degree)?;
    let mut cfg = graph.config.clone();
    cfg.dec_dense = degree;
    rebuild_with(graph, cfg)
}

pub fn add_dense_cross<T: Real>(graph: &ModelGraph<T>, mode: CrossMode) -> Result<ModelGraph<T>> {
    let mut cfg = graph.config.clone();
    cfg.cross_mode = mode;
    rebuild_with(graph, cfg)
}

/// U-Net, then dense encoder, cross connections and dense decoder in turn.
pub fn build_mdunet<T: Real>(config: &ArchConfig, seed: u64) -> Result<ModelGraph<T>> {
    let g = build_unet(config, seed)?;
    let g = add_dense_encoder(&g, config.enc_dense)?;
    let g = add_dense_cross(&g, config.cross_mode)?;
    add_dense_decoder(&g, config.dec_dense)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_source_ranges() {
        assert!(dense_sources(2, 4).is_empty());
        assert_eq!(dense_sources(3, 4), vec![1]);
        assert_eq!(dense_sources(5, 4), vec![1, 2, 3]);
        assert_eq!(dense_sources(5, 1), vec![3]);
        assert_eq!(dense_sources(5, 2), vec![2, 3]);
        assert!(dense_sources(5, 0).is_empty());
    }

    #[test]
    fn name_hash_is_stable() {
        assert_eq!(name_hash(""), 0xcbf2_9ce4_8422_2325);
        assert_ne!(name_hash("a.weight"), name_hash("b.weight"));
    }
}
