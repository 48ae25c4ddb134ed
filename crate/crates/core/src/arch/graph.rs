//! Declarative layer graphs: node specs, a builder, and shape inference.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{ConvParams, PoolParams};
use crate::tensor::Shape;

pub type NodeId = usize;

/// How a fusion node combines its inputs when counting gradient paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FuseKind {
    /// Parallel branches fed from one common source.
    Branch,
    /// A residual/skip connection joining different path lengths.
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Input { channels: usize },
    Conv2d(ConvParams),
    ConvTranspose2d(ConvParams),
    MaxPool(PoolParams),
    BatchNorm { channels: usize },
    Relu,
    Fuse { kind: FuseKind },
}

impl Op {
    pub fn is_conv(&self) -> bool {
        matches!(self, Op::Conv2d(_) | Op::ConvTranspose2d(_))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Conv2d(_) => "conv",
            Op::ConvTranspose2d(_) => "deconv",
            Op::MaxPool(_) => "maxpool",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu => "relu",
            Op::Fuse { .. } => "add",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub region: Region,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl ParamRole {
    fn suffix(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub node: NodeId,
    pub role: ParamRole,
}

/// Topologically ordered layer graph. Node `i` only reads nodes `< i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkGraph {
    nodes: Vec<NodeSpec>,
    taps: BTreeMap<String, NodeId>,
    output: NodeId,
}

impl NetworkGraph {
    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &NodeSpec {
        &self.nodes[id]
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn taps(&self) -> &BTreeMap<String, NodeId> {
        &self.taps
    }

    pub fn tap(&self, name: &str) -> Option<NodeId> {
        self.taps.get(name).copied()
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn inputs(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Input { .. }))
            .map(|(i, _)| i)
    }

    pub fn count(&self, pred: impl Fn(&Op) -> bool) -> usize {
        self.nodes.iter().filter(|n| pred(&n.op)).count()
    }

    /// Learnable tensors in node order, named `<node>.<role>`.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            let mut push = |role: ParamRole, shape: Shape| {
                out.push(ParamSpec {
                    name: format!("{}.{}", node.name, role.suffix()),
                    shape,
                    node: id,
                    role,
                })
            };
            match &node.op {
                Op::Conv2d(p) => {
                    push(ParamRole::Weight, p.conv_weight_shape());
                    if p.bias {
                        push(ParamRole::Bias, p.bias_shape());
                    }
                }
                Op::ConvTranspose2d(p) => {
                    push(ParamRole::Weight, p.deconv_weight_shape());
                    if p.bias {
                        push(ParamRole::Bias, p.bias_shape());
                    }
                }
                Op::BatchNorm { channels } => {
                    push(ParamRole::Gamma, Shape::new(1, *channels, 1, 1));
                    push(ParamRole::Beta, Shape::new(1, *channels, 1, 1));
                }
                _ => {}
            }
        }
        out
    }

    /// Number of distinct backward paths from the output to the (single)
    /// input. Parallel branches merged by a [`FuseKind::Branch`] node count
    /// as one path.
    pub fn gradient_fanout(&self) -> u64 {
        let mut paths = vec![0u64; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            paths[i] = match node.op {
                Op::Input { .. } => 1,
                Op::Fuse { kind: FuseKind::Branch } => node.inputs.iter().map(|&j| paths[j]).max().unwrap_or(0),
                _ => node.inputs.iter().map(|&j| paths[j]).sum(),
            };
        }
        paths[self.output]
    }

    /// Output shape of every node for an input batch of `input`.
    pub fn infer_shapes(&self, input: Shape) -> Result<Vec<Shape>> {
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let err = |msg: String| Error::Graph {
                node: node.name.clone(),
                msg,
            };
            for &j in &node.inputs {
                if j >= i {
                    return Err(err(format!("reads node {j} which is not computed before it")));
                }
            }
            let first = node.inputs.first().map(|&j| shapes[j]);
            let need = || first.ok_or_else(|| err("missing input edge".into()));
            let shape = match &node.op {
                Op::Input { channels } => {
                    if input.c != *channels {
                        return Err(err(format!("expects {channels} channels, input has {}", input.c)));
                    }
                    input
                }
                Op::Conv2d(p) => {
                    let s = need()?;
                    if s.c != p.in_channels {
                        return Err(err(format!("expects {} channels, got {}", p.in_channels, s.c)));
                    }
                    let (h, w) = p.conv_output(s.h, s.w).map_err(|e| err(e.to_string()))?;
                    Shape::new(s.n, p.out_channels, h, w)
                }
                Op::ConvTranspose2d(p) => {
                    let s = need()?;
                    if s.c != p.in_channels {
                        return Err(err(format!("expects {} channels, got {}", p.in_channels, s.c)));
                    }
                    let (h, w) = p.deconv_output(s.h, s.w).map_err(|e| err(e.to_string()))?;
                    Shape::new(s.n, p.out_channels, h, w)
                }
                Op::MaxPool(p) => {
                    let s = need()?;
                    let (h, w) = p.output(s.h, s.w).map_err(|e| err(e.to_string()))?;
                    Shape::new(s.n, s.c, h, w)
                }
                Op::BatchNorm { channels } => {
                    let s = need()?;
                    if s.c != *channels {
                        return Err(err(format!("expects {channels} channels, got {}", s.c)));
                    }
                    s
                }
                Op::Relu => need()?,
                Op::Fuse { .. } => {
                    if node.inputs.len() < 2 {
                        return Err(err("fusion needs at least two inputs".into()));
                    }
                    let s = need()?;
                    for &j in &node.inputs[1..] {
                        if shapes[j] != s {
                            return Err(err(format!(
                                "cannot add {} from `{}` to {} from `{}`",
                                shapes[j], self.nodes[j].name, s, self.nodes[node.inputs[0]].name
                            )));
                        }
                    }
                    s
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }
}

/// Appends nodes in execution order; names are prefixed by the current scope.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    nodes: Vec<NodeSpec>,
    taps: BTreeMap<String, NodeId>,
    region: Region,
}

impl GraphBuilder {
    pub fn new(region: Region) -> Self {
        GraphBuilder {
            nodes: Vec::new(),
            taps: BTreeMap::new(),
            region,
        }
    }

    pub fn set_region(&mut self, region: Region) {
        self.region = region;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&mut self, name: impl Into<String>, op: Op, inputs: Vec<NodeId>) -> NodeId {
        self.nodes.push(NodeSpec {
            name: name.into(),
            op,
            inputs,
            region: self.region,
        });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, name: &str, channels: usize) -> NodeId {
        self.node(name, Op::Input { channels }, vec![])
    }

    pub fn conv(&mut self, name: impl Into<String>, p: ConvParams, x: NodeId) -> NodeId {
        self.node(name, Op::Conv2d(p), vec![x])
    }

    pub fn deconv(&mut self, name: impl Into<String>, p: ConvParams, x: NodeId) -> NodeId {
        self.node(name, Op::ConvTranspose2d(p), vec![x])
    }

    pub fn relu(&mut self, name: impl Into<String>, x: NodeId) -> NodeId {
        self.node(name, Op::Relu, vec![x])
    }

    pub fn batch_norm(&mut self, name: impl Into<String>, channels: usize, x: NodeId) -> NodeId {
        self.node(name, Op::BatchNorm { channels }, vec![x])
    }

    pub fn maxpool(&mut self, name: impl Into<String>, x: NodeId) -> NodeId {
        self.node(name, Op::MaxPool(PoolParams::default()), vec![x])
    }

    pub fn fuse(&mut self, name: impl Into<String>, kind: FuseKind, xs: Vec<NodeId>) -> NodeId {
        self.node(name, Op::Fuse { kind }, xs)
    }

    pub fn tap(&mut self, name: &str, id: NodeId) {
        self.taps.insert(name.to_string(), id);
    }

    /// Copies `sub` into this graph with its single input bound to `at` and
    /// every node name prefixed by `prefix.`; returns the spliced output.
    pub fn splice(&mut self, sub: &NetworkGraph, at: NodeId, prefix: &str) -> NodeId {
        let mut map = vec![0; sub.nodes.len()];
        for (i, node) in sub.nodes.iter().enumerate() {
            map[i] = if matches!(node.op, Op::Input { .. }) {
                at
            } else {
                self.nodes.push(NodeSpec {
                    name: format!("{prefix}.{}", node.name),
                    op: node.op.clone(),
                    inputs: node.inputs.iter().map(|&j| map[j]).collect(),
                    region: self.region,
                });
                self.nodes.len() - 1
            };
        }
        map[sub.output]
    }

    pub fn finish(self, output: NodeId) -> Result<NetworkGraph> {
        let mut seen = HashSet::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !seen.insert(node.name.as_str()) {
                return Err(Error::Graph {
                    node: node.name.clone(),
                    msg: "duplicate node name".into(),
                });
            }
            if let Some(&j) = node.inputs.iter().find(|&&j| j >= i) {
                return Err(Error::Graph {
                    node: node.name.clone(),
                    msg: format!("edge from node {j} breaks topological order"),
                });
            }
        }
        if output >= self.nodes.len() {
            return Err(Error::Graph {
                node: format!("#{output}"),
                msg: "output node does not exist".into(),
            });
        }
        Ok(NetworkGraph {
            nodes: self.nodes,
            taps: self.taps,
            output,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_network_keeps_input_shape() {
        let mut b = GraphBuilder::new(Region::Decoder);
        let x = b.input("input", 3);
        let r = b.relu("relu", x);
        let g = b.finish(r).unwrap();
        let s = Shape::new(2, 3, 5, 7);
        assert_eq!(g.infer_shapes(s).unwrap(), vec![s, s]);
        assert_eq!(g.gradient_fanout(), 1);
    }

    #[test]
    fn mismatched_fusion_names_the_node() {
        let mut b = GraphBuilder::new(Region::Decoder);
        let x = b.input("input", 2);
        let c = b.conv("shrink", ConvParams::new(2, 2, 3), x);
        let f = b.fuse("bad_add", FuseKind::Skip, vec![c, x]);
        let g = b.finish(f).unwrap();
        match g.infer_shapes(Shape::new(1, 2, 6, 6)).unwrap_err() {
            Error::Graph { node, .. } => assert_eq!(node, "bad_add"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn forward_edges_and_duplicates_are_rejected() {
        let mut b = GraphBuilder::new(Region::Decoder);
        let x = b.input("input", 1);
        let r = b.node("relu", Op::Relu, vec![x + 5]);
        assert!(matches!(b.finish(r), Err(Error::Graph { node, .. }) if node == "relu"));

        let mut b = GraphBuilder::new(Region::Decoder);
        let x = b.input("input", 1);
        b.relu("a", x);
        let r = b.relu("a", x);
        assert!(b.finish(r).is_err());
    }

    #[test]
    fn bare_conv_has_one_gradient_path() {
        let mut b = GraphBuilder::new(Region::Decoder);
        let x = b.input("input", 1);
        let c = b.conv("conv", ConvParams::new(1, 1, 3).same(), x);
        assert_eq!(b.finish(c).unwrap().gradient_fanout(), 1);
    }
}
