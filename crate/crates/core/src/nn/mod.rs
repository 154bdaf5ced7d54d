//! Compact CPU tensor engine for 3-D volumetric networks.
//!
//! Networks are declarative layer graphs ([`LayerGraph`]) over 4-D tensors
//! laid out `(channels, x, y, z)`. The engine provides forward evaluation in
//! train and eval modes and exact reverse-mode gradients for every op, which
//! is all the architectures in this crate need: 3x3x3 (and 1x1x1)
//! convolutions, batch normalisation, ReLU, dropout, average/max pooling,
//! trilinear/nearest upsampling, channel concatenation, space-to-depth
//! rearrangement, global average pooling, broadcast, residual addition and a
//! channel softmax head.
//!
//! Everything is generic over the scalar type: `f32` for production training
//! and inference, `f64` for finite-difference gradient verification.

pub mod ops;
pub mod optim;
pub mod warp;

use ndarray::{Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar element type of the engine.
pub trait Elem:
    ndarray::NdFloat + num_traits::Float + num_traits::FromPrimitive + std::iter::Sum
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Elem for f32 {
    fn from_f64(x: f64) -> f32 {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    fn from_f64(x: f64) -> f64 {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Activation tensor: `(channels, x, y, z)`.
pub type Tensor<F> = Array4<F>;

pub type NodeId = usize;
pub type ParamId = usize;
pub type BufferId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpKind {
    Trilinear,
    Nearest,
}

/// One operation in the layer graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    /// External input; `slot` indexes into the tensors handed to `forward`.
    Input { slot: usize, channels: usize },
    Conv3 {
        weight: ParamId,
        bias: ParamId,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        mean: BufferId,
        var: BufferId,
        channels: usize,
    },
    Relu,
    Dropout { rate: f64 },
    AvgPool { factor: usize },
    MaxPool { factor: usize },
    Upsample { factor: usize, kind: UpKind },
    /// Channel concatenation of all inputs.
    Concat,
    SpaceToDepth { factor: usize },
    DepthToSpace { factor: usize },
    /// Per-voxel softmax over channels.
    Softmax,
    /// (C, X, Y, Z) -> (C, 1, 1, 1) spatial mean.
    GlobalAvgPool,
    /// Broadcast input 0 (C, 1, 1, 1) to the spatial dims of input 1.
    Broadcast,
    /// Elementwise sum of two same-shaped inputs.
    Add,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
}

/// Weight initialisation schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// He-style normal, std = sqrt(2 / fan_in); the usual choice before ReLU.
    HeNormal,
    Zero,
    One,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub init: Init,
    /// fan_in used by HeNormal (conv: in_ch * k^3).
    pub fan_in: usize,
}

/// Declarative network structure: nodes in topological order plus parameter
/// and buffer specifications. Carries no weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerGraph {
    pub nodes: Vec<Node>,
    pub params: Vec<ParamSpec>,
    /// Each buffer is a per-channel vector (running mean / running var).
    pub buffers: Vec<usize>,
    /// Designated outputs, in order.
    pub outputs: Vec<NodeId>,
    pub n_inputs: usize,
}

impl LayerGraph {
    /// Total trainable scalar count (conv weights and biases, BN affine).
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }
}

/// Trainable parameter tensors for a graph.
#[derive(Debug, Clone)]
pub struct Params<F> {
    pub tensors: Vec<ArrayD<F>>,
}

impl<F: Elem> Params<F> {
    /// Deterministic initialisation from a seed.
    pub fn init(graph: &LayerGraph, rng: &mut ChaCha8Rng) -> Params<F> {
        let tensors = graph
            .params
            .iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let data: Vec<F> = match spec.init {
                    Init::Zero => vec![F::zero(); n],
                    Init::One => vec![F::one(); n],
                    Init::HeNormal => {
                        let std = (2.0 / spec.fan_in.max(1) as f64).sqrt();
                        (0..n).map(|_| F::from_f64(normal_sample(rng) * std)).collect()
                    }
                };
                ArrayD::from_shape_vec(IxDyn(&spec.shape), data).expect("shape matches")
            })
            .collect();
        Params { tensors }
    }

    pub fn zeros_like(graph: &LayerGraph) -> Params<F> {
        Params {
            tensors: graph
                .params
                .iter()
                .map(|spec| ArrayD::zeros(IxDyn(&spec.shape)))
                .collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// Non-trainable per-channel state (batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct Buffers<F> {
    pub means: Vec<Vec<F>>,
    pub vars: Vec<Vec<F>>,
}

impl<F: Elem> Buffers<F> {
    pub fn init(graph: &LayerGraph) -> Buffers<F> {
        Buffers {
            means: graph.buffers.iter().map(|&c| vec![F::zero(); c]).collect(),
            vars: graph.buffers.iter().map(|&c| vec![F::one(); c]).collect(),
        }
    }
}

/// One standard normal draw via Box-Muller (no cached spare, so restoring an
/// RNG's word position restores the exact sample stream).
pub fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > 1e-300 {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Saved per-node context required by the backward pass.
pub enum Saved<F> {
    None,
    BatchNorm { xhat: Tensor<F>, invstd: Vec<F> },
    Dropout { mask: Tensor<F> },
    MaxPool { argmax: Vec<u32> },
}

/// Forward activations of one training-mode pass.
pub struct TrainTrace<F> {
    pub values: Vec<Tensor<F>>,
    pub saved: Vec<Saved<F>>,
}

impl<F: Elem> TrainTrace<F> {
    pub fn output(&self, graph: &LayerGraph, idx: usize) -> &Tensor<F> {
        &self.values[graph.outputs[idx]]
    }
}

fn he_conv_spec(out_ch: usize, in_ch: usize, ksize: usize) -> (ParamSpec, ParamSpec) {
    let w = ParamSpec {
        shape: vec![out_ch, in_ch, ksize, ksize, ksize],
        init: Init::HeNormal,
        fan_in: in_ch * ksize * ksize * ksize,
    };
    let b = ParamSpec {
        shape: vec![out_ch],
        init: Init::Zero,
        fan_in: 1,
    };
    (w, b)
}

/// Incremental graph construction with channel bookkeeping.
pub struct GraphBuilder {
    nodes: Vec<Node>,
    params: Vec<ParamSpec>,
    buffers: Vec<usize>,
    channels: Vec<usize>,
    n_inputs: usize,
}

impl GraphBuilder {
    pub fn new() -> GraphBuilder {
        GraphBuilder {
            nodes: Vec::new(),
            params: Vec::new(),
            buffers: Vec::new(),
            channels: Vec::new(),
            n_inputs: 0,
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, out_ch: usize) -> NodeId {
        self.nodes.push(Node { op, inputs });
        self.channels.push(out_ch);
        self.nodes.len() - 1
    }

    pub fn channels(&self, n: NodeId) -> usize {
        self.channels[n]
    }

    pub fn input(&mut self, channels: usize) -> NodeId {
        let slot = self.n_inputs;
        self.n_inputs += 1;
        self.push(Op::Input { slot, channels }, vec![], channels)
    }

    pub fn conv(&mut self, x: NodeId, out_ch: usize, ksize: usize) -> NodeId {
        self.conv_init(x, out_ch, ksize, Init::HeNormal)
    }

    /// Convolution with an explicit weight init (zero-init heads give
    /// registration nets an identity starting displacement).
    pub fn conv_init(&mut self, x: NodeId, out_ch: usize, ksize: usize, init: Init) -> NodeId {
        let in_ch = self.channels[x];
        let (mut w, b) = he_conv_spec(out_ch, in_ch, ksize);
        w.init = init;
        let weight = self.params.len();
        self.params.push(w);
        let bias = self.params.len();
        self.params.push(b);
        self.push(
            Op::Conv3 {
                weight,
                bias,
                in_ch,
                out_ch,
                ksize,
            },
            vec![x],
            out_ch,
        )
    }

    pub fn batch_norm(&mut self, x: NodeId) -> NodeId {
        let channels = self.channels[x];
        let gamma = self.params.len();
        self.params.push(ParamSpec {
            shape: vec![channels],
            init: Init::One,
            fan_in: 1,
        });
        let beta = self.params.len();
        self.params.push(ParamSpec {
            shape: vec![channels],
            init: Init::Zero,
            fan_in: 1,
        });
        let mean = self.buffers.len();
        self.buffers.push(channels);
        let var = self.buffers.len();
        self.buffers.push(channels);
        self.push(
            Op::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                channels,
            },
            vec![x],
            channels,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let c = self.channels[x];
        self.push(Op::Relu, vec![x], c)
    }

    /// Conv -> ReLU -> BatchNorm, the standard block of every network here.
    pub fn conv_block(&mut self, x: NodeId, out_ch: usize) -> NodeId {
        let c = self.conv(x, out_ch, 3);
        let r = self.relu(c);
        self.batch_norm(r)
    }

    pub fn dropout(&mut self, x: NodeId, rate: f64) -> NodeId {
        let c = self.channels[x];
        self.push(Op::Dropout { rate }, vec![x], c)
    }

    pub fn avg_pool(&mut self, x: NodeId, factor: usize) -> NodeId {
        let c = self.channels[x];
        self.push(Op::AvgPool { factor }, vec![x], c)
    }

    pub fn max_pool(&mut self, x: NodeId, factor: usize) -> NodeId {
        let c = self.channels[x];
        self.push(Op::MaxPool { factor }, vec![x], c)
    }

    pub fn upsample(&mut self, x: NodeId, factor: usize, kind: UpKind) -> NodeId {
        let c = self.channels[x];
        self.push(Op::Upsample { factor, kind }, vec![x], c)
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        let c = xs.iter().map(|&x| self.channels[x]).sum();
        self.push(Op::Concat, xs.to_vec(), c)
    }

    pub fn space_to_depth(&mut self, x: NodeId, factor: usize) -> NodeId {
        let c = self.channels[x] * factor * factor * factor;
        self.push(Op::SpaceToDepth { factor }, vec![x], c)
    }

    pub fn depth_to_space(&mut self, x: NodeId, factor: usize) -> NodeId {
        let f3 = factor * factor * factor;
        let c = self.channels[x] / f3;
        self.push(Op::DepthToSpace { factor }, vec![x], c)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let c = self.channels[x];
        self.push(Op::Softmax, vec![x], c)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let c = self.channels[x];
        self.push(Op::GlobalAvgPool, vec![x], c)
    }

    pub fn broadcast(&mut self, vec_node: NodeId, shape_ref: NodeId) -> NodeId {
        let c = self.channels[vec_node];
        self.push(Op::Broadcast, vec![vec_node, shape_ref], c)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let c = self.channels[a];
        self.push(Op::Add, vec![a, b], c)
    }

    pub fn finish(self, outputs: Vec<NodeId>) -> LayerGraph {
        LayerGraph {
            nodes: self.nodes,
            params: self.params,
            buffers: self.buffers,
            outputs,
            n_inputs: self.n_inputs,
        }
    }
}

impl Default for GraphBuilder {
    fn default() -> Self {
        GraphBuilder::new()
    }
}

fn spatial_divisibility_check<F: Elem>(
    graph: &LayerGraph,
    inputs: &[Tensor<F>],
) -> Result<()> {
    // Ops that shrink the grid by `factor` need divisible dims.
    let mut max_pool_factor = 1usize;
    for node in &graph.nodes {
        let f = match node.op {
            Op::AvgPool { factor } | Op::MaxPool { factor } => factor,
            Op::SpaceToDepth { factor } => factor,
            _ => 1,
        };
        max_pool_factor = max_pool_factor.max(f);
    }
    for t in inputs {
        let d = t.dim();
        for dim in [d.1, d.2, d.3] {
            if max_pool_factor > 1 && dim % 2 != 0 {
                return Err(Error::geometry(format!(
                    "input dims ({}, {}, {}) are not divisible for the network's pooling pyramid; pad_to_multiple first",
                    d.1, d.2, d.3
                )));
            }
        }
    }
    Ok(())
}

/// Training-mode forward pass: batch-norm uses batch statistics and updates
/// running buffers, dropout is active, and every activation is retained for
/// [`backward`].
pub fn forward_train<F: Elem>(
    graph: &LayerGraph,
    params: &Params<F>,
    buffers: &mut Buffers<F>,
    inputs: &[Tensor<F>],
    rng: &mut ChaCha8Rng,
) -> Result<TrainTrace<F>> {
    spatial_divisibility_check(graph, inputs)?;
    let mut values: Vec<Tensor<F>> = Vec::with_capacity(graph.nodes.len());
    let mut saved: Vec<Saved<F>> = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let node_inputs: Vec<&Tensor<F>> = node.inputs.iter().map(|&i| &values[i]).collect();
        let (val, ctx, upd) =
            eval_node(node, params, Some(&*buffers), &node_inputs, inputs, Some(rng), true)?;
        if let Some(upd) = upd {
            buffers.apply_update(upd, BN_MOMENTUM);
        }
        values.push(val);
        saved.push(ctx);
    }
    Ok(TrainTrace { values, saved })
}

/// Eval-mode forward pass: batch-norm uses running statistics, dropout is
/// identity, intermediates are freed as soon as their last consumer ran.
pub fn forward_eval<F: Elem>(
    graph: &LayerGraph,
    params: &Params<F>,
    buffers: &Buffers<F>,
    inputs: &[Tensor<F>],
) -> Result<Vec<Tensor<F>>> {
    spatial_divisibility_check(graph, inputs)?;
    let mut remaining = vec![0usize; graph.nodes.len()];
    for node in &graph.nodes {
        for &i in &node.inputs {
            remaining[i] += 1;
        }
    }
    for &o in &graph.outputs {
        remaining[o] += 1;
    }
    let mut values: Vec<Option<Tensor<F>>> = (0..graph.nodes.len()).map(|_| None).collect();
    for (idx, node) in graph.nodes.iter().enumerate() {
        let inputs_of_node: Vec<&Tensor<F>> = node
            .inputs
            .iter()
            .map(|&i| values[i].as_ref().expect("topological order"))
            .collect();
        let val = eval_node(node, params, Some(buffers), &inputs_of_node, inputs, None, false)?.0;
        values[idx] = Some(val);
        for &i in &node.inputs {
            remaining[i] -= 1;
            if remaining[i] == 0 {
                values[i] = None;
            }
        }
    }
    let mut outputs = Vec::with_capacity(graph.outputs.len());
    for &o in &graph.outputs {
        remaining[o] -= 1;
        if remaining[o] == 0 {
            outputs.push(values[o].take().expect("output retained"));
        } else {
            outputs.push(values[o].clone().expect("output retained"));
        }
    }
    Ok(outputs)
}

// The shared node evaluator. In train mode batch norm uses batch statistics
// and returns the fresh stats so the caller can fold them into the running
// buffers; in eval mode buffers are read-only.
#[allow(clippy::too_many_arguments)]
fn eval_node<F: Elem>(
    node: &Node,
    params: &Params<F>,
    buffers: Option<&Buffers<F>>,
    node_inputs: &[&Tensor<F>],
    external: &[Tensor<F>],
    rng: Option<&mut ChaCha8Rng>,
    train: bool,
) -> Result<(Tensor<F>, Saved<F>, Option<(BufferId, Vec<F>, BufferId, Vec<F>)>)> {
    let out = match &node.op {
        Op::Input { slot, channels } => {
            let t = external
                .get(*slot)
                .ok_or_else(|| Error::invalid(format!("missing network input slot {slot}")))?;
            if t.dim().0 != *channels {
                return Err(Error::geometry(format!(
                    "input slot {slot}: expected {channels} channels, got {}",
                    t.dim().0
                )));
            }
            (t.clone(), Saved::None, None)
        }
        Op::Conv3 { weight, bias, ksize, .. } => {
            let y = ops::conv3_forward(node_inputs[0], &params.tensors[*weight], &params.tensors[*bias], *ksize)?;
            (y, Saved::None, None)
        }
        Op::BatchNorm { gamma, beta, mean, var, .. } => {
            let g = &params.tensors[*gamma];
            let b = &params.tensors[*beta];
            if train {
                let (y, xhat, invstd, bmean, bvar) =
                    ops::batch_norm_train(node_inputs[0], g, b);
                (y, Saved::BatchNorm { xhat, invstd }, Some((*mean, bmean, *var, bvar)))
            } else {
                let bufs = buffers.ok_or_else(|| Error::invalid("eval mode requires buffers"))?;
                let y = ops::batch_norm_eval(node_inputs[0], g, b, &bufs.means[*mean], &bufs.vars[*var]);
                (y, Saved::None, None)
            }
        }
        Op::Relu => (ops::relu_forward(node_inputs[0]), Saved::None, None),
        Op::Dropout { rate } => {
            if train && *rate > 0.0 {
                let rng = rng.ok_or_else(|| Error::invalid("train mode requires rng"))?;
                let (y, mask) = ops::dropout_forward(node_inputs[0], *rate, rng);
                (y, Saved::Dropout { mask }, None)
            } else {
                (node_inputs[0].clone(), Saved::None, None)
            }
        }
        Op::AvgPool { factor } => (ops::avg_pool_forward(node_inputs[0], *factor)?, Saved::None, None),
        Op::MaxPool { factor } => {
            let (y, argmax) = ops::max_pool_forward(node_inputs[0], *factor)?;
            (y, Saved::MaxPool { argmax }, None)
        }
        Op::Upsample { factor, kind } => (
            ops::upsample_forward(node_inputs[0], *factor, *kind),
            Saved::None,
            None,
        ),
        Op::Concat => (ops::concat_forward(node_inputs)?, Saved::None, None),
        Op::SpaceToDepth { factor } => {
            (ops::space_to_depth(node_inputs[0], *factor)?, Saved::None, None)
        }
        Op::DepthToSpace { factor } => {
            (ops::depth_to_space(node_inputs[0], *factor)?, Saved::None, None)
        }
        Op::Softmax => (ops::softmax_forward(node_inputs[0]), Saved::None, None),
        Op::GlobalAvgPool => (ops::global_avg_pool_forward(node_inputs[0]), Saved::None, None),
        Op::Broadcast => (
            ops::broadcast_forward(node_inputs[0], node_inputs[1])?,
            Saved::None,
            None,
        ),
        Op::Add => (ops::add_forward(node_inputs[0], node_inputs[1])?, Saved::None, None),
    };
    Ok(out)
}

/// Reverse-mode pass over a [`TrainTrace`]. `output_grads` pairs each graph
/// output with the loss gradient at that output (`None` for outputs that do
/// not participate in the loss). Returns parameter gradients.
pub fn backward<F: Elem>(
    graph: &LayerGraph,
    params: &Params<F>,
    trace: &TrainTrace<F>,
    output_grads: Vec<Option<Tensor<F>>>,
) -> Result<Params<F>> {
    if output_grads.len() != graph.outputs.len() {
        return Err(Error::invalid("output_grads length mismatch"));
    }
    let mut grads: Vec<Option<Tensor<F>>> = (0..graph.nodes.len()).map(|_| None).collect();
    for (slot, g) in output_grads.into_iter().enumerate() {
        if let Some(g) = g {
            accumulate(&mut grads[graph.outputs[slot]], g);
        }
    }
    let mut pgrads = Params::<F>::zeros_like(graph);

    for idx in (0..graph.nodes.len()).rev() {
        let Some(dout) = grads[idx].take() else { continue };
        let node = &graph.nodes[idx];
        match &node.op {
            Op::Input { .. } => {}
            Op::Conv3 { weight, bias, ksize, .. } => {
                let x = &trace.values[node.inputs[0]];
                let (dx, dw, db) =
                    ops::conv3_backward(x, &params.tensors[*weight], &dout, *ksize)?;
                pgrads.tensors[*weight] += &dw;
                pgrads.tensors[*bias] += &db;
                accumulate(&mut grads[node.inputs[0]], dx);
            }
            Op::BatchNorm { gamma, beta, .. } => {
                let Saved::BatchNorm { xhat, invstd } = &trace.saved[idx] else {
                    return Err(Error::invalid("missing batch norm context"));
                };
                let (dx, dgamma, dbeta) =
                    ops::batch_norm_backward(xhat, invstd, &params.tensors[*gamma], &dout);
                pgrads.tensors[*gamma] += &dgamma;
                pgrads.tensors[*beta] += &dbeta;
                accumulate(&mut grads[node.inputs[0]], dx);
            }
            Op::Relu => {
                let y = &trace.values[idx];
                accumulate(&mut grads[node.inputs[0]], ops::relu_backward(y, &dout));
            }
            Op::Dropout { rate } => {
                let dx = match &trace.saved[idx] {
                    Saved::Dropout { mask } => ops::dropout_backward(mask, &dout),
                    _ => dout, // rate == 0: identity
                };
                let _ = rate;
                accumulate(&mut grads[node.inputs[0]], dx);
            }
            Op::AvgPool { factor } => {
                let in_dim = trace.values[node.inputs[0]].dim();
                accumulate(
                    &mut grads[node.inputs[0]],
                    ops::avg_pool_backward(&dout, *factor, in_dim),
                );
            }
            Op::MaxPool { factor } => {
                let Saved::MaxPool { argmax } = &trace.saved[idx] else {
                    return Err(Error::invalid("missing max pool context"));
                };
                let in_dim = trace.values[node.inputs[0]].dim();
                accumulate(
                    &mut grads[node.inputs[0]],
                    ops::max_pool_backward(&dout, argmax, *factor, in_dim),
                );
            }
            Op::Upsample { factor, kind } => {
                let in_dim = trace.values[node.inputs[0]].dim();
                accumulate(
                    &mut grads[node.inputs[0]],
                    ops::upsample_backward(&dout, *factor, *kind, in_dim),
                );
            }
            Op::Concat => {
                let mut start = 0usize;
                for &i in &node.inputs {
                    let c = trace.values[i].dim().0;
                    let slice = dout
                        .slice(ndarray::s![start..start + c, .., .., ..])
                        .to_owned();
                    accumulate(&mut grads[i], slice);
                    start += c;
                }
            }
            Op::SpaceToDepth { factor } => {
                accumulate(
                    &mut grads[node.inputs[0]],
                    ops::depth_to_space(&dout, *factor)?,
                );
            }
            Op::DepthToSpace { factor } => {
                accumulate(
                    &mut grads[node.inputs[0]],
                    ops::space_to_depth(&dout, *factor)?,
                );
            }
            Op::Softmax => {
                let y = &trace.values[idx];
                accumulate(&mut grads[node.inputs[0]], ops::softmax_backward(y, &dout));
            }
            Op::GlobalAvgPool => {
                let in_dim = trace.values[node.inputs[0]].dim();
                accumulate(
                    &mut grads[node.inputs[0]],
                    ops::global_avg_pool_backward(&dout, in_dim),
                );
            }
            Op::Broadcast => {
                accumulate(
                    &mut grads[node.inputs[0]],
                    ops::broadcast_backward(&dout),
                );
                // No gradient into the shape reference.
            }
            Op::Add => {
                accumulate(&mut grads[node.inputs[0]], dout.clone());
                accumulate(&mut grads[node.inputs[1]], dout);
            }
        }
    }
    Ok(pgrads)
}

fn accumulate<F: Elem>(slot: &mut Option<Tensor<F>>, g: Tensor<F>) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}

// forward_train needs to update running buffers; eval_node_borrowed returns
// the update so the loop below can apply it with a mutable borrow. This
// wrapper keeps that plumbing out of the public API.
impl<F: Elem> Buffers<F> {
    fn apply_update(&mut self, upd: (BufferId, Vec<F>, BufferId, Vec<F>), momentum: f64) {
        let (mid, bmean, vid, bvar) = upd;
        let m = F::from_f64(momentum);
        let om = F::one() - m;
        for (r, b) in self.means[mid].iter_mut().zip(bmean) {
            *r = om * *r + m * b;
        }
        for (r, b) in self.vars[vid].iter_mut().zip(bvar) {
            *r = om * *r + m * b;
        }
    }
}

/// Batch-norm running statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;
