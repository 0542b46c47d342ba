//! Declarative layer graphs.
//!
//! A [`ModuleGraph`] is a DAG of layer nodes with named parameters. The same
//! graph drives three consumers: the taped executor (training/inference), the
//! shape propagator, and the complexity analyzer. Nodes carry a hierarchical
//! path such as `neck.b16.csadrf.stage1.a.pw` so costs can be aggregated per
//! block or per component.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::{conv_out_extent, Conv2dCfg};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

pub type NodeId = usize;

/// What a node computes.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    /// External input looked up by name at execution time.
    Input { name: String },
    /// Bare parameter tensor exposed as a node (expert kernel stacks).
    Param,
    /// Convolution. With `dynamic_weight` the kernel is the node's second
    /// input instead of a stored parameter.
    Conv { c_in: usize, c_out: usize, k: usize, cfg: Conv2dCfg, bias: bool, dynamic_weight: bool },
    Relu6,
    Sigmoid,
    ChannelShuffle { groups: usize },
    Concat,
    Add,
    SliceChannels { from: usize, to: usize },
    AvgPool2,
    UpsampleNearest2,
    GlobalAvgPool,
    Linear { c_in: usize, c_out: usize },
    SoftmaxRows,
    /// Weighted sum of expert kernels by a routing vector.
    MixKernels,
    /// Multiply by one element of a routing vector (second input).
    ScaleByElement { index: usize },
    ChannelNorm { channels: usize, eps: f64 },
}

/// Parameter initialization scheme.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Kaiming-uniform with the given fan-in.
    KaimingFanIn(usize),
    Zeros,
    Const(f64),
    /// Zero bias except the objectness slot of every anchor block.
    HeadBias { per_anchor: usize, obj_offset: usize, obj_value: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn count(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64
    }
}

/// Whether a node's cost belongs to the paper-style closed-form budget or to
/// the conditional/dilated extras reported as a separate surcharge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CostClass {
    #[default]
    Mainline,
    Surcharge,
}

#[derive(Clone, Debug)]
pub struct GraphNode {
    pub path: String,
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
    pub params: Vec<ParamSpec>,
    pub cost_class: CostClass,
}

/// A DAG of layers with named outputs. Node inputs always reference earlier
/// nodes, so node order is a topological order.
#[derive(Clone, Debug, Default)]
pub struct ModuleGraph {
    pub nodes: Vec<GraphNode>,
    pub outputs: Vec<(String, NodeId)>,
}

impl ModuleGraph {
    pub fn param_specs(&self) -> impl Iterator<Item = &ParamSpec> {
        self.nodes.iter().flat_map(|n| n.params.iter())
    }

    pub fn param_count(&self) -> u64 {
        self.param_specs().map(|p| p.count()).sum()
    }

    /// Parameter size in MB at 4 bytes per parameter.
    pub fn param_mb(&self) -> f64 {
        self.param_count() as f64 * 4.0 / (1024.0 * 1024.0)
    }
}

/// Appends nodes to a graph under construction.
#[derive(Default)]
pub struct GraphBuilder {
    graph: ModuleGraph,
    cost_class: CostClass,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn finish(mut self, outputs: &[(&str, NodeId)]) -> ModuleGraph {
        self.graph.outputs = outputs.iter().map(|(name, id)| (name.to_string(), *id)).collect();
        self.graph
    }

    /// Nodes added inside `f` are tagged as beyond-paper surcharge cost.
    pub fn surcharge<T>(&mut self, f: impl FnOnce(&mut Self) -> T) -> T {
        let prev = self.cost_class;
        self.cost_class = CostClass::Surcharge;
        let out = f(self);
        self.cost_class = prev;
        out
    }

    fn push(
        &mut self,
        path: &str,
        kind: LayerKind,
        inputs: Vec<NodeId>,
        params: Vec<ParamSpec>,
    ) -> NodeId {
        for &i in &inputs {
            assert!(i < self.graph.nodes.len(), "graph input {i} references a later node");
        }
        self.graph.nodes.push(GraphNode {
            path: path.to_string(),
            kind,
            inputs,
            params,
            cost_class: self.cost_class,
        });
        self.graph.nodes.len() - 1
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(name, LayerKind::Input { name: name.to_string() }, vec![], vec![])
    }

    /// Convolution with stored weights (and bias unless `bias` is false).
    pub fn conv(
        &mut self,
        path: &str,
        x: NodeId,
        c_in: usize,
        c_out: usize,
        k: usize,
        cfg: Conv2dCfg,
        bias: bool,
    ) -> NodeId {
        let cin_g = c_in / cfg.groups;
        let mut params = vec![ParamSpec {
            name: format!("{path}.w"),
            shape: vec![c_out, cin_g, k, k],
            init: Init::KaimingFanIn(cin_g * k * k),
        }];
        if bias {
            params.push(ParamSpec {
                name: format!("{path}.b"),
                shape: vec![c_out],
                init: Init::Zeros,
            });
        }
        self.push(
            path,
            LayerKind::Conv { c_in, c_out, k, cfg, bias, dynamic_weight: false },
            vec![x],
            params,
        )
    }

    /// Convolution whose kernel is produced by another node (expert mixing).
    /// Bias remains a stored parameter.
    pub fn conv_dynamic(
        &mut self,
        path: &str,
        x: NodeId,
        weight: NodeId,
        c_in: usize,
        c_out: usize,
        k: usize,
        cfg: Conv2dCfg,
    ) -> NodeId {
        let params = vec![ParamSpec {
            name: format!("{path}.b"),
            shape: vec![c_out],
            init: Init::Zeros,
        }];
        self.push(
            path,
            LayerKind::Conv { c_in, c_out, k, cfg, bias: true, dynamic_weight: true },
            vec![x, weight],
            params,
        )
    }

    /// Prediction convolution with the objectness bias offset.
    pub fn pred_conv(
        &mut self,
        path: &str,
        x: NodeId,
        c_in: usize,
        per_anchor: usize,
        anchors: usize,
        obj_offset: usize,
    ) -> NodeId {
        let c_out = per_anchor * anchors;
        let params = vec![
            ParamSpec {
                name: format!("{path}.w"),
                shape: vec![c_out, c_in, 1, 1],
                init: Init::KaimingFanIn(c_in),
            },
            ParamSpec {
                name: format!("{path}.b"),
                shape: vec![c_out],
                init: Init::HeadBias { per_anchor, obj_offset, obj_value: -4.0 },
            },
        ];
        self.push(
            path,
            LayerKind::Conv {
                c_in,
                c_out,
                k: 1,
                cfg: Conv2dCfg::pointwise(),
                bias: true,
                dynamic_weight: false,
            },
            vec![x],
            params,
        )
    }

    /// Raw parameter tensor exposed as a node.
    pub fn param_node(&mut self, path: &str, shape: &[usize], init: Init) -> NodeId {
        let spec = ParamSpec { name: format!("{path}.w"), shape: shape.to_vec(), init };
        self.push(path, LayerKind::Param, vec![], vec![spec])
    }

    pub fn relu6(&mut self, path: &str, x: NodeId) -> NodeId {
        self.push(path, LayerKind::Relu6, vec![x], vec![])
    }

    pub fn sigmoid(&mut self, path: &str, x: NodeId) -> NodeId {
        self.push(path, LayerKind::Sigmoid, vec![x], vec![])
    }

    pub fn channel_shuffle(&mut self, path: &str, x: NodeId, groups: usize) -> NodeId {
        self.push(path, LayerKind::ChannelShuffle { groups }, vec![x], vec![])
    }

    pub fn concat(&mut self, path: &str, xs: &[NodeId]) -> NodeId {
        self.push(path, LayerKind::Concat, xs.to_vec(), vec![])
    }

    pub fn add(&mut self, path: &str, a: NodeId, b: NodeId) -> NodeId {
        self.push(path, LayerKind::Add, vec![a, b], vec![])
    }

    pub fn slice_channels(&mut self, path: &str, x: NodeId, from: usize, to: usize) -> NodeId {
        self.push(path, LayerKind::SliceChannels { from, to }, vec![x], vec![])
    }

    pub fn avg_pool2(&mut self, path: &str, x: NodeId) -> NodeId {
        self.push(path, LayerKind::AvgPool2, vec![x], vec![])
    }

    pub fn upsample2(&mut self, path: &str, x: NodeId) -> NodeId {
        self.push(path, LayerKind::UpsampleNearest2, vec![x], vec![])
    }

    pub fn global_avg_pool(&mut self, path: &str, x: NodeId) -> NodeId {
        self.push(path, LayerKind::GlobalAvgPool, vec![x], vec![])
    }

    pub fn linear(&mut self, path: &str, x: NodeId, c_in: usize, c_out: usize) -> NodeId {
        let params = vec![
            ParamSpec {
                name: format!("{path}.w"),
                shape: vec![c_out, c_in],
                init: Init::KaimingFanIn(c_in),
            },
            ParamSpec { name: format!("{path}.b"), shape: vec![c_out], init: Init::Zeros },
        ];
        self.push(path, LayerKind::Linear { c_in, c_out }, vec![x], params)
    }

    pub fn softmax_rows(&mut self, path: &str, x: NodeId) -> NodeId {
        self.push(path, LayerKind::SoftmaxRows, vec![x], vec![])
    }

    pub fn mix_kernels(&mut self, path: &str, routing: NodeId, experts: NodeId) -> NodeId {
        self.push(path, LayerKind::MixKernels, vec![routing, experts], vec![])
    }

    pub fn scale_by_element(&mut self, path: &str, x: NodeId, s: NodeId, index: usize) -> NodeId {
        self.push(path, LayerKind::ScaleByElement { index }, vec![x, s], vec![])
    }

    pub fn channel_norm(&mut self, path: &str, x: NodeId, channels: usize) -> NodeId {
        let params = vec![
            ParamSpec { name: format!("{path}.g"), shape: vec![channels], init: Init::Const(1.0) },
            ParamSpec { name: format!("{path}.b"), shape: vec![channels], init: Init::Zeros },
        ];
        self.push(path, LayerKind::ChannelNorm { channels, eps: 1e-5 }, vec![x], params)
    }
}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S: Scalar> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<S>) {
        self.map.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.map
            .get(name)
            .ok_or_else(|| TensorError::BadParameter { context: format!("missing parameter {name}") })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| TensorError::BadParameter { context: format!("missing parameter {name}") })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn total_elements(&self) -> u64 {
        self.map.values().map(|t| t.len() as u64).sum()
    }
}

/// Initialize every parameter of the graph deterministically from a seed.
pub fn init_params<S: Scalar>(graph: &ModuleGraph, seed: u64) -> ParamStore<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in graph.param_specs() {
        let n: usize = spec.shape.iter().product();
        let data: Vec<S> = match &spec.init {
            Init::KaimingFanIn(fan_in) => {
                let bound = (6.0 / (*fan_in).max(1) as f64).sqrt();
                (0..n).map(|_| S::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound)).collect()
            }
            Init::Zeros => vec![S::zero(); n],
            Init::Const(v) => vec![S::from_f64(*v); n],
            Init::HeadBias { per_anchor, obj_offset, obj_value } => (0..n)
                .map(|i| {
                    if i % per_anchor == *obj_offset {
                        S::from_f64(*obj_value)
                    } else {
                        S::zero()
                    }
                })
                .collect(),
        };
        store.insert(&spec.name, Tensor::new(&spec.shape, data).expect("init shape"));
    }
    store
}

/// Result of executing a graph on a tape.
pub struct Execution {
    pub node_vars: Vec<Var>,
    pub outputs: BTreeMap<String, Var>,
    pub param_vars: BTreeMap<String, Var>,
}

impl Execution {
    pub fn output(&self, name: &str) -> Result<Var> {
        self.outputs.get(name).copied().ok_or_else(|| TensorError::BadParameter {
            context: format!("no graph output named {name}"),
        })
    }
}

/// Run the graph on a tape. With `train` the parameters participate in the
/// gradient; inputs never do.
pub fn execute<S: Scalar>(
    graph: &ModuleGraph,
    params: &ParamStore<S>,
    inputs: &BTreeMap<String, Tensor<S>>,
    tape: &mut Tape<S>,
    train: bool,
) -> Result<Execution> {
    let mut node_vars: Vec<Var> = Vec::with_capacity(graph.nodes.len());
    let mut param_vars: BTreeMap<String, Var> = BTreeMap::new();

    fn get_param<S: Scalar>(
        tape: &mut Tape<S>,
        params: &ParamStore<S>,
        param_vars: &mut BTreeMap<String, Var>,
        spec: &ParamSpec,
        train: bool,
    ) -> Result<Var> {
        if let Some(&v) = param_vars.get(&spec.name) {
            return Ok(v);
        }
        let t = params.get(&spec.name)?;
        if t.shape() != spec.shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                context: format!(
                    "parameter {} has shape {:?}, graph expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                ),
            });
        }
        let v = tape.input(t.clone(), train);
        param_vars.insert(spec.name.clone(), v);
        Ok(v)
    }

    for node in &graph.nodes {
        let ins: Vec<Var> = node.inputs.iter().map(|&i| node_vars[i]).collect();
        let var = match &node.kind {
            LayerKind::Input { name } => {
                let t = inputs.get(name).ok_or_else(|| TensorError::BadParameter {
                    context: format!("missing graph input {name}"),
                })?;
                tape.input(t.clone(), false)
            }
            LayerKind::Param => get_param(tape, params, &mut param_vars, &node.params[0], train)?,
            LayerKind::Conv { cfg, bias, dynamic_weight, .. } => {
                let (w, bias_param) = if *dynamic_weight {
                    (ins[1], 0)
                } else {
                    (get_param(tape, params, &mut param_vars, &node.params[0], train)?, 1)
                };
                let b = if *bias {
                    Some(get_param(tape, params, &mut param_vars, &node.params[bias_param], train)?)
                } else {
                    None
                };
                tape.conv2d(ins[0], w, b, *cfg)?
            }
            LayerKind::Relu6 => tape.relu6(ins[0])?,
            LayerKind::Sigmoid => tape.sigmoid(ins[0])?,
            LayerKind::ChannelShuffle { groups } => tape.channel_shuffle(ins[0], *groups)?,
            LayerKind::Concat => tape.concat_channels(&ins)?,
            LayerKind::Add => tape.add(ins[0], ins[1])?,
            LayerKind::SliceChannels { from, to } => tape.slice_channels(ins[0], *from, *to)?,
            LayerKind::AvgPool2 => tape.avg_pool2(ins[0])?,
            LayerKind::UpsampleNearest2 => tape.upsample_nearest2(ins[0])?,
            LayerKind::GlobalAvgPool => tape.global_avg_pool(ins[0])?,
            LayerKind::Linear { .. } => {
                let w = get_param(tape, params, &mut param_vars, &node.params[0], train)?;
                let b = get_param(tape, params, &mut param_vars, &node.params[1], train)?;
                tape.linear(ins[0], w, b)?
            }
            LayerKind::SoftmaxRows => tape.softmax_rows(ins[0])?,
            LayerKind::MixKernels => tape.mix_kernels(ins[0], ins[1])?,
            LayerKind::ScaleByElement { index } => {
                tape.scale_by_element(ins[0], ins[1], *index)?
            }
            LayerKind::ChannelNorm { eps, .. } => {
                let g = get_param(tape, params, &mut param_vars, &node.params[0], train)?;
                let b = get_param(tape, params, &mut param_vars, &node.params[1], train)?;
                tape.channel_norm(ins[0], g, b, *eps)?
            }
        };
        node_vars.push(var);
    }

    let outputs =
        graph.outputs.iter().map(|(name, id)| (name.clone(), node_vars[*id])).collect();
    Ok(Execution { node_vars, outputs, param_vars })
}

/// Propagate tensor shapes through the graph without touching data.
pub fn propagate_shapes(
    graph: &ModuleGraph,
    input_shapes: &BTreeMap<String, Vec<usize>>,
) -> Result<Vec<Vec<usize>>> {
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let ins: Vec<Vec<usize>> = node.inputs.iter().map(|&i| shapes[i].clone()).collect();
        let shape = match &node.kind {
            LayerKind::Input { name } => {
                input_shapes.get(name).cloned().ok_or_else(|| TensorError::BadParameter {
                    context: format!("missing input shape for {name}"),
                })?
            }
            LayerKind::Param => node.params[0].shape.clone(),
            LayerKind::Conv { c_in, c_out, k, cfg, .. } => {
                let s = &ins[0];
                if s.len() != 4 || s[1] != *c_in {
                    return Err(TensorError::ShapeMismatch {
                        context: format!("{}: conv expects (n,{c_in},h,w), got {s:?}", node.path),
                    });
                }
                let oh = conv_out_extent(s[2], *k, cfg)?;
                let ow = conv_out_extent(s[3], *k, cfg)?;
                vec![s[0], *c_out, oh, ow]
            }
            LayerKind::Relu6 | LayerKind::Sigmoid | LayerKind::ChannelShuffle { .. } => {
                ins[0].clone()
            }
            LayerKind::Concat => {
                let mut out = ins[0].clone();
                for s in &ins[1..] {
                    if s[0] != out[0] || s[2..] != out[2..] {
                        return Err(TensorError::ShapeMismatch {
                            context: format!("{}: concat operands differ", node.path),
                        });
                    }
                    out[1] += s[1];
                }
                out
            }
            LayerKind::Add => {
                if ins[0] != ins[1] {
                    return Err(TensorError::ShapeMismatch {
                        context: format!("{}: add operands differ", node.path),
                    });
                }
                ins[0].clone()
            }
            LayerKind::SliceChannels { from, to } => {
                let mut out = ins[0].clone();
                if *to > out[1] || from >= to {
                    return Err(TensorError::ShapeMismatch {
                        context: format!("{}: slice {from}..{to} of {}", node.path, out[1]),
                    });
                }
                out[1] = to - from;
                out
            }
            LayerKind::AvgPool2 => {
                let s = &ins[0];
                vec![s[0], s[1], s[2] / 2, s[3] / 2]
            }
            LayerKind::UpsampleNearest2 => {
                let s = &ins[0];
                vec![s[0], s[1], s[2] * 2, s[3] * 2]
            }
            LayerKind::GlobalAvgPool => vec![ins[0][0], ins[0][1]],
            LayerKind::Linear { c_in, c_out } => {
                if ins[0].len() != 2 || ins[0][1] != *c_in {
                    return Err(TensorError::ShapeMismatch {
                        context: format!("{}: linear expects (n,{c_in})", node.path),
                    });
                }
                vec![ins[0][0], *c_out]
            }
            LayerKind::SoftmaxRows => ins[0].clone(),
            LayerKind::MixKernels => ins[1][1..].to_vec(),
            LayerKind::ScaleByElement { .. } => ins[0].clone(),
            LayerKind::ChannelNorm { .. } => ins[0].clone(),
        };
        shapes.push(shape);
    }
    Ok(shapes)
}
