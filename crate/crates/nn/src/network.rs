//! Dataflow graph of named nodes, executed in definition order.

use std::time::Duration;

use ndarray::{ArrayD, Axis, IxDyn};

use crate::error::{shape_err, NnError, Result};
use crate::layers::{
    gelu, max_pool2d, BatchNorm2d, ClassToken, Conv2d, Dense, LayerNorm, MultiHeadAttention,
    PositionEmbedding, TensorData, TensorRef, TensorRole,
};
use crate::scalar::Scalar;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum Op<T> {
    Input,
    Conv2d(Conv2d<T>),
    Linear(Dense<T>),
    BatchNorm2d(BatchNorm2d<T>),
    LayerNorm(LayerNorm<T>),
    Attention(MultiHeadAttention<T>),
    ClassToken(ClassToken<T>),
    PositionEmbedding(PositionEmbedding<T>),
    Relu,
    Gelu,
    Add,
    MaxPool2d { kernel: usize, stride: usize, padding: usize },
    GlobalAvgPool,
    Flatten,
    /// `[C, H, W]` -> `[H * W, C]`
    PatchTokens,
    SelectToken(usize),
    MeanTokens,
}

impl<T: Scalar> Op<T> {
    /// Operator name as it appears in dynamic profiles.
    pub fn kind_name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Conv2d(_) => "conv2d",
            Op::Linear(d) => d.kind_name(),
            Op::BatchNorm2d(_) => "batch_norm",
            Op::LayerNorm(_) => "layer_norm",
            Op::Attention(_) => "multi_head_attention",
            Op::ClassToken(_) => "cls_token",
            Op::PositionEmbedding(_) => "position_embedding",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::Add => "add",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::GlobalAvgPool => "adaptive_avg_pool2d",
            Op::Flatten => "flatten",
            Op::PatchTokens => "patch_tokens",
            Op::SelectToken(_) => "select_token",
            Op::MeanTokens => "mean_tokens",
        }
    }

    pub fn has_parameters(&self) -> bool {
        matches!(
            self,
            Op::Conv2d(_)
                | Op::Linear(_)
                | Op::BatchNorm2d(_)
                | Op::LayerNorm(_)
                | Op::Attention(_)
                | Op::ClassToken(_)
                | Op::PositionEmbedding(_)
        )
    }

    fn arity(&self) -> usize {
        match self {
            Op::Input => 0,
            Op::Add => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node<T> {
    /// Dotted qualified path, unique within the network.
    pub name: String,
    pub op: Op<T>,
    pub inputs: Vec<NodeId>,
    /// Extra latency injected after the op runs; only used by instrumented fixtures.
    pub delay: Option<Duration>,
}

impl<T: Scalar> Node<T> {
    pub fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let name = &self.name;
        let first = || inputs[0].to_vec();
        match &self.op {
            Op::Input => Err(shape_err(name, "input node has no computed shape")),
            Op::Conv2d(c) => c.output_shape(name, inputs[0]),
            Op::Linear(d) => d.output_shape(name, inputs[0]),
            Op::BatchNorm2d(bn) => {
                if inputs[0].len() == 3 && inputs[0][0] == bn.channels() {
                    Ok(first())
                } else {
                    Err(shape_err(name, format!("batch_norm({}) on {:?}", bn.channels(), inputs[0])))
                }
            }
            Op::LayerNorm(ln) => {
                if inputs[0].last() == Some(&ln.dim()) {
                    Ok(first())
                } else {
                    Err(shape_err(name, format!("layer_norm({}) on {:?}", ln.dim(), inputs[0])))
                }
            }
            Op::Attention(a) => a.output_shape(name, inputs[0]),
            Op::ClassToken(c) => {
                let s = inputs[0];
                if s.len() == 2 && s[1] == c.token.len() {
                    Ok(vec![s[0] + 1, s[1]])
                } else {
                    Err(shape_err(name, format!("cls token({}) on {s:?}", c.token.len())))
                }
            }
            Op::PositionEmbedding(p) => {
                if inputs[0] == p.table.shape() {
                    Ok(first())
                } else {
                    Err(shape_err(name, format!("position table {:?} on {:?}", p.table.shape(), inputs[0])))
                }
            }
            Op::Relu | Op::Gelu => Ok(first()),
            Op::Add => {
                if inputs[0] == inputs[1] {
                    Ok(first())
                } else {
                    Err(shape_err(name, format!("add of {:?} and {:?}", inputs[0], inputs[1])))
                }
            }
            Op::MaxPool2d { kernel, stride, padding } => {
                let s = inputs[0];
                if s.len() != 3 || *stride == 0 || s[1] + 2 * padding < *kernel || s[2] + 2 * padding < *kernel {
                    return Err(shape_err(name, format!("max_pool2d on {s:?}")));
                }
                Ok(vec![
                    s[0],
                    (s[1] + 2 * padding - kernel) / stride + 1,
                    (s[2] + 2 * padding - kernel) / stride + 1,
                ])
            }
            Op::GlobalAvgPool => {
                let s = inputs[0];
                if s.len() == 3 {
                    Ok(vec![s[0]])
                } else {
                    Err(shape_err(name, format!("global pool on {s:?}")))
                }
            }
            Op::Flatten => Ok(vec![inputs[0].iter().product()]),
            Op::PatchTokens => {
                let s = inputs[0];
                if s.len() == 3 {
                    Ok(vec![s[1] * s[2], s[0]])
                } else {
                    Err(shape_err(name, format!("patch tokens on {s:?}")))
                }
            }
            Op::SelectToken(i) => {
                let s = inputs[0];
                if s.len() == 2 && *i < s[0] {
                    Ok(vec![s[1]])
                } else {
                    Err(shape_err(name, format!("select token {i} on {s:?}")))
                }
            }
            Op::MeanTokens => {
                let s = inputs[0];
                if s.len() == 2 && s[0] > 0 {
                    Ok(vec![s[1]])
                } else {
                    Err(shape_err(name, format!("mean tokens on {s:?}")))
                }
            }
        }
    }

    pub fn forward(&self, inputs: &[&ArrayD<T>]) -> Result<ArrayD<T>> {
        let name = &self.name;
        let shapes: Vec<&[usize]> = inputs.iter().map(|x| x.shape()).collect();
        if shapes.len() != self.op.arity() {
            return Err(shape_err(name, format!("expected {} inputs", self.op.arity())));
        }
        let y = match &self.op {
            Op::Input => return Err(shape_err(name, "input node is not executable")),
            Op::Conv2d(c) => c.forward(name, inputs[0])?,
            Op::Linear(d) => d.forward(name, inputs[0])?,
            Op::BatchNorm2d(bn) => bn.forward(name, inputs[0])?,
            Op::LayerNorm(ln) => ln.forward(name, inputs[0])?,
            Op::Attention(a) => a.forward(name, inputs[0])?,
            Op::ClassToken(c) => c.forward(name, inputs[0])?,
            Op::PositionEmbedding(p) => p.forward(name, inputs[0])?,
            Op::Relu => inputs[0].mapv(|v| v.max(T::zero())),
            Op::Gelu => inputs[0].mapv(gelu),
            Op::Add => {
                self.output_shape(&shapes)?;
                inputs[0] + inputs[1]
            }
            Op::MaxPool2d { kernel, stride, padding } => {
                let out = self.output_shape(&shapes)?;
                max_pool2d(inputs[0], *kernel, *stride, *padding, &out)
            }
            Op::GlobalAvgPool => {
                self.output_shape(&shapes)?;
                let x = inputs[0];
                let c = x.shape()[0];
                let flat = x
                    .view()
                    .into_shape_with_order((c, x.len() / c.max(1)))
                    .map_err(|e| shape_err(name, e.to_string()))?;
                flat.mean_axis(Axis(1))
                    .ok_or_else(|| shape_err(name, "empty spatial extent"))?
                    .into_dyn()
            }
            Op::Flatten => {
                let x = inputs[0];
                x.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&[x.len()]))
                    .map_err(|e| shape_err(name, e.to_string()))?
            }
            Op::PatchTokens => {
                self.output_shape(&shapes)?;
                let x = inputs[0];
                let (c, hw) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
                let flat = x
                    .view()
                    .into_shape_with_order((c, hw))
                    .map_err(|e| shape_err(name, e.to_string()))?;
                flat.t().as_standard_layout().into_owned().into_dyn()
            }
            Op::SelectToken(i) => {
                self.output_shape(&shapes)?;
                inputs[0].index_axis(Axis(0), *i).to_owned()
            }
            Op::MeanTokens => {
                self.output_shape(&shapes)?;
                inputs[0]
                    .mean_axis(Axis(0))
                    .ok_or_else(|| shape_err(name, "empty sequence"))?
            }
        };
        if let Some(d) = self.delay {
            std::thread::sleep(d);
        }
        Ok(y)
    }

    /// Every stored tensor of this node, keyed by checkpoint name.
    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = Vec::new();
        let n = &self.name;
        let float = |key: String, role, a| TensorRef { key, role, data: TensorData::Float(a) };
        match &self.op {
            Op::Conv2d(c) => {
                out.push(float(format!("{n}.weight"), TensorRole::Trainable, &c.weight));
                if let Some(b) = &c.bias {
                    out.push(float(format!("{n}.bias"), TensorRole::Trainable, b));
                }
            }
            Op::Linear(d) => d.tensors(n, &mut out),
            Op::BatchNorm2d(bn) => {
                out.push(float(format!("{n}.weight"), TensorRole::Trainable, &bn.weight));
                out.push(float(format!("{n}.bias"), TensorRole::Trainable, &bn.bias));
                out.push(float(format!("{n}.running_mean"), TensorRole::Buffer, &bn.running_mean));
                out.push(float(format!("{n}.running_var"), TensorRole::Buffer, &bn.running_var));
            }
            Op::LayerNorm(ln) => {
                out.push(float(format!("{n}.weight"), TensorRole::Trainable, &ln.weight));
                out.push(float(format!("{n}.bias"), TensorRole::Trainable, &ln.bias));
            }
            Op::Attention(a) => {
                for p in a.projections() {
                    p.dense.tensors(&p.name, &mut out);
                }
            }
            Op::ClassToken(c) => out.push(float(n.clone(), TensorRole::Trainable, &c.token)),
            Op::PositionEmbedding(p) => out.push(float(n.clone(), TensorRole::Trainable, &p.table)),
            _ => {}
        }
        out
    }

    /// Mutable access to every float tensor, keyed as in [`Node::tensors`].
    pub fn float_tensors_mut(&mut self) -> Vec<(String, &mut ArrayD<T>)> {
        let n = self.name.clone();
        let mut out: Vec<(String, &mut ArrayD<T>)> = Vec::new();
        fn dense<'a, T>(prefix: &str, d: &'a mut Dense<T>, out: &mut Vec<(String, &'a mut ArrayD<T>)>) {
            match d {
                Dense::Float(l) => {
                    out.push((format!("{prefix}.weight"), &mut l.weight));
                    if let Some(b) = l.bias.as_mut() {
                        out.push((format!("{prefix}.bias"), b));
                    }
                }
                Dense::Int8(q) => {
                    if let Some(b) = q.bias.as_mut() {
                        out.push((format!("{prefix}.bias"), b));
                    }
                }
                Dense::Half(h) => {
                    if let Some(b) = h.bias.as_mut() {
                        out.push((format!("{prefix}.bias"), b));
                    }
                }
            }
        }
        match &mut self.op {
            Op::Conv2d(c) => {
                out.push((format!("{n}.weight"), &mut c.weight));
                if let Some(b) = c.bias.as_mut() {
                    out.push((format!("{n}.bias"), b));
                }
            }
            Op::Linear(d) => dense(&n, d, &mut out),
            Op::BatchNorm2d(bn) => {
                out.push((format!("{n}.weight"), &mut bn.weight));
                out.push((format!("{n}.bias"), &mut bn.bias));
                out.push((format!("{n}.running_mean"), &mut bn.running_mean));
                out.push((format!("{n}.running_var"), &mut bn.running_var));
            }
            Op::LayerNorm(ln) => {
                out.push((format!("{n}.weight"), &mut ln.weight));
                out.push((format!("{n}.bias"), &mut ln.bias));
            }
            Op::Attention(a) => {
                for p in a.projections_mut() {
                    dense(&p.name, &mut p.dense, &mut out);
                }
            }
            Op::ClassToken(c) => out.push((n.clone(), &mut c.token)),
            Op::PositionEmbedding(p) => out.push((n.clone(), &mut p.table)),
            _ => {}
        }
        out
    }

    /// Number of trainable elements, whatever their storage type.
    pub fn param_count(&self) -> u64 {
        self.tensors()
            .iter()
            .filter(|t| t.role == TensorRole::Trainable)
            .map(|t| t.data.len() as u64)
            .sum()
    }
}

/// Callbacks around each executed node.
pub trait ForwardObserver<T> {
    fn before(&mut self, _node: &Node<T>, _inputs: &[&ArrayD<T>]) {}
    fn after(&mut self, _node: &Node<T>, _output: &ArrayD<T>) {}
}

struct NoObserver;
impl<T> ForwardObserver<T> for NoObserver {}

/// A network is an ordered list of nodes; node 0 is the input and the last node is the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    nodes: Vec<Node<T>>,
    input_shape: Vec<usize>,
}

impl<T: Scalar> Network<T> {
    pub fn new(nodes: Vec<Node<T>>, input_shape: Vec<usize>) -> Result<Self> {
        let net = Self { nodes, input_shape };
        net.check_wiring()?;
        Ok(net)
    }

    fn check_wiring(&self) -> Result<()> {
        let first = self
            .nodes
            .first()
            .ok_or_else(|| NnError::InvalidGraph("empty network".into()))?;
        if !matches!(first.op, Op::Input) {
            return Err(NnError::InvalidGraph("node 0 must be the input".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !seen.insert(node.name.as_str()) {
                return Err(NnError::InvalidGraph(format!("duplicate node name `{}`", node.name)));
            }
            if i > 0 && matches!(node.op, Op::Input) {
                return Err(NnError::InvalidGraph("only node 0 may be an input".into()));
            }
            if node.inputs.len() != node.op.arity() || node.inputs.iter().any(|&j| j >= i) {
                return Err(NnError::InvalidGraph(format!("bad inputs for `{}`", node.name)));
            }
        }
        if self.nodes.len() < 2 {
            return Err(NnError::InvalidGraph("network has no computation".into()));
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [Node<T>] {
        &mut self.nodes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn set_input_shape(&mut self, shape: Vec<usize>) {
        self.input_shape = shape;
    }

    pub fn output_id(&self) -> NodeId {
        self.nodes.len() - 1
    }

    pub fn node(&self, name: &str) -> Option<&Node<T>> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn node_mut(&mut self, name: &str) -> Option<&mut Node<T>> {
        self.nodes.iter_mut().find(|n| n.name == name)
    }

    pub fn position(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Output shape of every node for an input of the given shape.
    pub fn infer_shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            if matches!(node.op, Op::Input) {
                shapes.push(input.to_vec());
                continue;
            }
            let ins: Vec<&[usize]> = node.inputs.iter().map(|&j| shapes[j].as_slice()).collect();
            shapes.push(node.output_shape(&ins)?);
        }
        Ok(shapes)
    }

    pub fn forward(&self, x: &ArrayD<T>) -> Result<ArrayD<T>> {
        self.forward_observed(x, &mut NoObserver)
    }

    pub fn forward_observed(&self, x: &ArrayD<T>, observer: &mut dyn ForwardObserver<T>) -> Result<ArrayD<T>> {
        let n = self.nodes.len();
        let mut last_use = vec![0usize; n];
        for (i, node) in self.nodes.iter().enumerate() {
            for &j in &node.inputs {
                last_use[j] = i;
            }
        }
        let out_id = self.output_id();
        last_use[out_id] = usize::MAX;
        let mut values: Vec<Option<ArrayD<T>>> = vec![None; n];
        values[0] = Some(x.clone());
        for (i, node) in self.nodes.iter().enumerate().skip(1) {
            let y = {
                let ins: Vec<&ArrayD<T>> = node
                    .inputs
                    .iter()
                    .map(|&j| values[j].as_ref().expect("inputs computed before use"))
                    .collect();
                observer.before(node, &ins);
                let y = node.forward(&ins)?;
                observer.after(node, &y);
                y
            };
            for &j in &node.inputs {
                if last_use[j] == i {
                    values[j] = None;
                }
            }
            values[i] = Some(y);
        }
        Ok(values[out_id].take().expect("output computed"))
    }

    /// Trainable element count over the whole network.
    pub fn param_count(&self) -> u64 {
        self.nodes.iter().map(Node::param_count).sum()
    }

    /// Bytes of every stored tensor: parameters, buffers and quantization metadata.
    pub fn storage_bytes(&self) -> u64 {
        self.nodes
            .iter()
            .flat_map(|n| n.tensors())
            .map(|t| (t.data.len() * t.data.element_width()) as u64)
            .sum()
    }
}

/// Incremental builder that names parameterless nodes automatically.
pub struct NetworkBuilder<T> {
    nodes: Vec<Node<T>>,
    input_shape: Vec<usize>,
}

impl<T: Scalar> NetworkBuilder<T> {
    pub fn new(input_shape: Vec<usize>) -> Self {
        Self {
            nodes: vec![Node { name: "input".into(), op: Op::Input, inputs: vec![], delay: None }],
            input_shape,
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn push(&mut self, name: impl Into<String>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        self.nodes.push(Node { name: name.into(), op, inputs: inputs.to_vec(), delay: None });
        self.nodes.len() - 1
    }

    pub fn set_delay(&mut self, id: NodeId, delay: Duration) {
        self.nodes[id].delay = Some(delay);
    }

    pub fn build(self) -> Result<Network<T>> {
        Network::new(self.nodes, self.input_shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Network<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = NetworkBuilder::new(vec![2, 6, 6]);
        let c = b.push("conv", Op::Conv2d(Conv2d::new(&mut rng, 2, 3, (3, 3), (1, 1), (1, 1), 1, true)), &[0]);
        let r = b.push("relu", Op::Relu, &[c]);
        let p = b.push("pool", Op::GlobalAvgPool, &[r]);
        b.push("fc", Op::Linear(Dense::Float(Linear::new(&mut rng, 3, 4, true))), &[p]);
        b.build().unwrap()
    }

    #[test]
    fn infer_shapes_agrees_with_forward() {
        let net = tiny();
        let shapes = net.infer_shapes(&[2, 6, 6]).unwrap();
        let y = net.forward(&ArrayD::zeros(IxDyn(&[2, 6, 6]))).unwrap();
        assert_eq!(shapes.last().unwrap(), y.shape());
        assert_eq!(shapes[1], vec![3, 6, 6]);
    }

    #[test]
    fn param_and_byte_counts() {
        let net = tiny();
        assert_eq!(net.param_count(), (2 * 3 * 9 + 3) + (3 * 4 + 4));
        assert_eq!(net.storage_bytes(), net.param_count() * 4);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut b = NetworkBuilder::<f32>::new(vec![1]);
        b.push("a", Op::Relu, &[0]);
        b.push("a", Op::Relu, &[1]);
        assert!(b.build().is_err());
    }

    #[test]
    fn forward_reports_shape_errors() {
        let net = tiny();
        let err = net.forward(&ArrayD::zeros(IxDyn(&[3, 6, 6]))).unwrap_err();
        assert!(matches!(err, NnError::ShapeMismatch { ref node, .. } if node == "conv"));
    }
}
