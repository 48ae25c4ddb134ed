//! Parameter storage and graph execution on a tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::arch::graph::{NetworkGraph, NodeId, Op, ParamRole, ParamSpec};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::kernels::{NormMode, RunningStats};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// A graph together with its learnable parameters and batch-norm statistics.
#[derive(Debug, Clone)]
pub struct Network<T> {
    graph: NetworkGraph,
    specs: Vec<ParamSpec>,
    params: Vec<Tensor<T>>,
    /// Indexed by node; `Some` for batch-norm nodes.
    stats: Vec<Option<RunningStats<T>>>,
    /// Parameter indices owned by each node, in spec order.
    node_params: Vec<Vec<usize>>,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// One value per graph node.
    pub nodes: Vec<Var>,
    /// One leaf per parameter, aligned with [`Network::param_specs`].
    pub params: Vec<Var>,
}

impl Forward {
    pub fn output(&self, graph: &NetworkGraph) -> Var {
        self.nodes[graph.output()]
    }
}

fn fan_in(op: &Op) -> usize {
    match op {
        Op::Conv2d(p) => p.in_channels * p.kernel.0 * p.kernel.1,
        // each output pixel of a transposed conv sees about k/s taps per axis
        Op::ConvTranspose2d(p) => (p.in_channels * p.kernel.0 * p.kernel.1 / (p.stride.0 * p.stride.1)).max(1),
        _ => 1,
    }
}

/// Init scale of a layer that produces the logits directly, relative to
/// Kaiming. The residual sums in the 4-channel decoder inflate activations
/// about fortyfold, so full-scale logits start saturated and stall training.
pub const LOGIT_INIT_SCALE: f64 = 0.02;

impl<T: Scalar> Network<T> {
    /// Kaiming (fan-in, normal) weights, zero biases, unit gamma, zero beta.
    /// A parametrized output node is drawn at [`LOGIT_INIT_SCALE`].
    pub fn new(graph: NetworkGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = graph.param_specs();
        let params = specs
            .iter()
            .map(|s| match s.role {
                ParamRole::Weight => {
                    let gain = if s.node == graph.output() {
                        LOGIT_INIT_SCALE
                    } else {
                        1.0
                    };
                    let std = gain * (2.0 / fan_in(&graph.node(s.node).op) as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("finite std");
                    let data = (0..s.shape.numel())
                        .map(|_| T::from_f64(normal.sample(&mut rng)))
                        .collect();
                    Tensor::from_vec(s.shape, data).expect("spec shape")
                }
                ParamRole::Gamma => Tensor::ones(s.shape),
                ParamRole::Bias | ParamRole::Beta => Tensor::zeros(s.shape),
            })
            .collect();
        Self::from_parts(graph, specs, params)
    }

    fn from_parts(graph: NetworkGraph, specs: Vec<ParamSpec>, params: Vec<Tensor<T>>) -> Self {
        let mut node_params = vec![Vec::new(); graph.nodes().len()];
        for (i, s) in specs.iter().enumerate() {
            node_params[s.node].push(i);
        }
        let stats = graph
            .nodes()
            .iter()
            .map(|n| match n.op {
                Op::BatchNorm { channels } => Some(RunningStats::new(channels)),
                _ => None,
            })
            .collect();
        Network {
            graph,
            specs,
            params,
            stats,
            node_params,
        }
    }

    pub fn graph(&self) -> &NetworkGraph {
        &self.graph
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.specs.iter().position(|s| s.name == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .map(move |i| &mut self.params[i])
    }

    pub fn running_stats(&self, node: NodeId) -> Option<&RunningStats<T>> {
        self.stats.get(node).and_then(Option::as_ref)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Evaluates the graph with `input` bound to its input node. Parameters
    /// become tape leaves when `trainable`, constants otherwise. In
    /// [`NormMode::Train`] batch-norm running statistics are updated.
    pub fn forward(&mut self, tape: &mut Tape<T>, input: Var, mode: NormMode, trainable: bool) -> Result<Forward> {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        self.forward_with_params(tape, input, params, mode)
    }

    /// Evaluates the graph with caller-supplied parameter values, one per
    /// entry of [`Network::param_specs`].
    pub fn forward_with_params(
        &mut self,
        tape: &mut Tape<T>,
        input: Var,
        params: Vec<Var>,
        mode: NormMode,
    ) -> Result<Forward> {
        if params.len() != self.specs.len() {
            return Err(Error::Contract(format!(
                "{} parameter values for {} parameters",
                params.len(),
                self.specs.len()
            )));
        }
        for (s, &v) in self.specs.iter().zip(&params) {
            if tape.value(v).shape() != s.shape {
                return Err(Error::dim(
                    s.name.clone(),
                    format!("expected {}, got {}", s.shape, tape.value(v).shape()),
                ));
            }
        }
        let mut nodes: Vec<Var> = Vec::with_capacity(self.graph.nodes().len());
        let mut bound = false;
        for (id, node) in self.graph.nodes().iter().enumerate() {
            let x = |k: usize| nodes[node.inputs[k]];
            let own = &self.node_params[id];
            let p = |k: usize| params[own[k]];
            let named = |e: Error| match e {
                Error::Graph { .. } => e,
                other => Error::Graph {
                    node: node.name.clone(),
                    msg: other.to_string(),
                },
            };
            let v = match &node.op {
                Op::Input { .. } => {
                    if bound {
                        return Err(Error::Graph {
                            node: node.name.clone(),
                            msg: "graph has more than one input".into(),
                        });
                    }
                    bound = true;
                    input
                }
                Op::Conv2d(cp) => tape.conv2d(x(0), p(0), cp.bias.then(|| p(1)), cp).map_err(named)?,
                Op::ConvTranspose2d(cp) => tape
                    .conv_transpose2d(x(0), p(0), cp.bias.then(|| p(1)), cp)
                    .map_err(named)?,
                Op::MaxPool(pp) => tape.maxpool2d(x(0), pp).map_err(named)?,
                Op::BatchNorm { .. } => {
                    let stats = self.stats[id].as_mut().expect("batch-norm node has statistics");
                    tape.batch_norm(x(0), p(0), p(1), stats, mode).map_err(named)?
                }
                Op::Relu => tape.relu(x(0)),
                Op::Fuse { .. } => {
                    let xs: Vec<Var> = node.inputs.iter().map(|&j| nodes[j]).collect();
                    tape.fuse_add(&xs).map_err(named)?
                }
            };
            nodes.push(v);
        }
        Ok(Forward { nodes, params })
    }

    /// Logits for a batch in inference mode; statistics are left untouched.
    pub fn predict(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let f = self.forward(&mut tape, x, NormMode::Infer, false)?;
        Ok(tape.value(f.output(&self.graph)).clone())
    }

    /// Parameters under `param.<name>`, statistics under
    /// `bn.<node>.running_mean` / `bn.<node>.running_var`.
    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut c = Checkpoint::default();
        for (s, p) in self.specs.iter().zip(&self.params) {
            c.insert(format!("param.{}", s.name), p.clone());
        }
        for (id, st) in self.stats.iter().enumerate() {
            if let Some(st) = st {
                let name = &self.graph.node(id).name;
                let shape = Shape::new(1, st.mean.len(), 1, 1);
                c.insert(
                    format!("bn.{name}.running_mean"),
                    Tensor::from_vec(shape, st.mean.clone()).expect("stats shape"),
                );
                c.insert(
                    format!("bn.{name}.running_var"),
                    Tensor::from_vec(shape, st.var.clone()).expect("stats shape"),
                );
            }
        }
        c
    }

    pub fn from_checkpoint(graph: NetworkGraph, c: &Checkpoint<T>) -> Result<Self> {
        let specs = graph.param_specs();
        let mut params = Vec::with_capacity(specs.len());
        for s in &specs {
            let t = c.get(&format!("param.{}", s.name))?;
            if t.shape() != s.shape {
                return Err(Error::Ingestion(format!(
                    "parameter `{}` has shape {} in the checkpoint, graph expects {}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
            params.push(t.clone());
        }
        let mut net = Self::from_parts(graph, specs, params);
        for id in 0..net.stats.len() {
            if net.stats[id].is_none() {
                continue;
            }
            let name = net.graph.node(id).name.clone();
            let mean = c.get(&format!("bn.{name}.running_mean"))?.data().to_vec();
            let var = c.get(&format!("bn.{name}.running_var"))?.data().to_vec();
            let st = net.stats[id].as_mut().expect("checked");
            if mean.len() != st.mean.len() || var.len() != st.var.len() {
                return Err(Error::Ingestion(format!(
                    "batch-norm statistics of `{name}` have the wrong length"
                )));
            }
            *st = RunningStats { mean, var };
        }
        Ok(net)
    }
}
