use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::AutodiffError;
use crate::rng::{derived_rng, stream};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
}

/// Axis over which a unit-power layer measures power.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PowerScope {
    /// Each batch item separately.
    PerItem,
    /// The whole batch; a running estimate is frozen for inference.
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Input,
    Dense { units: usize },
    /// 1x1 convolution over the channel (last) axis; numerically a dense
    /// layer, kept distinct for reporting.
    Conv1x1 { filters: usize },
    BatchNorm { eps: f64, momentum: f64 },
    LayerNorm { eps: f64 },
    MultiHeadAttention { heads: usize },
    ResidualAdd,
    Activation(Activation),
    Reshape,
    /// Scales to mean complex-symbol power 1, interpreting adjacent pairs of
    /// the flattened item as (re, im).
    UnitPower(PowerScope),
    /// Sign quantizer with straight-through gradient.
    SignQuantize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
    /// Output shape excluding the batch axis.
    pub out_shape: Vec<usize>,
    #[serde(skip)]
    pub(crate) params: Vec<Tensor>,
    /// Non-trainable state (running statistics).
    #[serde(skip)]
    pub(crate) state: Vec<Tensor>,
}

impl Node {
    fn param_names(&self) -> &'static [&'static str] {
        match self.kind {
            LayerKind::Dense { .. } | LayerKind::Conv1x1 { .. } => &["weight", "bias"],
            LayerKind::BatchNorm { .. } | LayerKind::LayerNorm { .. } => &["gamma", "beta"],
            LayerKind::MultiHeadAttention { .. } => &["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"],
            _ => &[],
        }
    }

    fn state_names(&self) -> &'static [&'static str] {
        match self.kind {
            LayerKind::BatchNorm { .. } => &["running_mean", "running_var"],
            LayerKind::UnitPower(PowerScope::Batch) => &["running_power"],
            _ => &[],
        }
    }
}

struct Cache {
    tape: Tape,
    input: Var,
    output: Var,
    params: Vec<Var>,
}

impl std::fmt::Debug for Cache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cache").field("nodes", &self.tape.len()).finish()
    }
}

/// Gradients from [`Graph::backward`], parameters in [`Graph::params`] order.
#[derive(Debug, Clone)]
pub struct GraphGrads {
    pub params: Vec<Tensor>,
    pub input: Tensor,
}

/// A feed-forward layer graph. Node 0 is the input; the last node is the
/// output. Nodes may only reference earlier nodes, so insertion order is a
/// topological order.
#[derive(Debug, Serialize, Deserialize)]
pub struct Graph {
    input_shape: Vec<usize>,
    nodes: Vec<Node>,
    #[serde(skip, default = "default_mode")]
    mode: Mode,
    #[serde(skip)]
    cache: Option<Cache>,
}

fn default_mode() -> Mode {
    Mode::Infer
}

impl Clone for Graph {
    fn clone(&self) -> Self {
        Self { input_shape: self.input_shape.clone(), nodes: self.nodes.clone(), mode: self.mode, cache: None }
    }
}

impl Graph {
    pub fn new(input_shape: Vec<usize>) -> Self {
        let input = Node {
            name: "input".into(),
            kind: LayerKind::Input,
            inputs: vec![],
            out_shape: input_shape.clone(),
            params: vec![],
            state: vec![],
        };
        Self { input_shape, nodes: vec![input], mode: Mode::Infer, cache: None }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes.last().expect("graph has an input node").out_shape
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        if mode == Mode::Infer {
            self.cache = None;
        }
    }

    pub fn last(&self) -> NodeId {
        self.nodes.len() - 1
    }

    fn width(&self, id: NodeId) -> usize {
        *self.nodes[id].out_shape.last().unwrap_or(&1)
    }

    fn push(&mut self, name: String, kind: LayerKind, inputs: Vec<NodeId>, out_shape: Vec<usize>) -> NodeId {
        for &i in &inputs {
            assert!(i < self.nodes.len(), "node {name} references a later node");
        }
        let mut node = Node { name, kind, inputs, out_shape, params: vec![], state: vec![] };
        let (params, state) = default_tensors(&node, self);
        node.params = params;
        node.state = state;
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    pub fn dense(&mut self, name: &str, from: NodeId, units: usize) -> NodeId {
        let mut shape = self.nodes[from].out_shape.clone();
        *shape.last_mut().expect("dense needs a non-scalar input") = units;
        self.push(name.into(), LayerKind::Dense { units }, vec![from], shape)
    }

    pub fn conv1x1(&mut self, name: &str, from: NodeId, filters: usize) -> NodeId {
        let mut shape = self.nodes[from].out_shape.clone();
        *shape.last_mut().expect("conv needs a channel axis") = filters;
        self.push(name.into(), LayerKind::Conv1x1 { filters }, vec![from], shape)
    }

    pub fn batch_norm(&mut self, name: &str, from: NodeId) -> NodeId {
        let shape = self.nodes[from].out_shape.clone();
        self.push(name.into(), LayerKind::BatchNorm { eps: 1e-5, momentum: 0.9 }, vec![from], shape)
    }

    pub fn layer_norm(&mut self, name: &str, from: NodeId) -> NodeId {
        let shape = self.nodes[from].out_shape.clone();
        self.push(name.into(), LayerKind::LayerNorm { eps: 1e-6 }, vec![from], shape)
    }

    /// Self-attention over `[tokens, width]` items.
    pub fn attention(&mut self, name: &str, from: NodeId, heads: usize) -> NodeId {
        let shape = self.nodes[from].out_shape.clone();
        assert_eq!(shape.len(), 2, "attention expects [tokens, width] items");
        assert_eq!(shape[1] % heads, 0, "width must divide into heads");
        self.push(name.into(), LayerKind::MultiHeadAttention { heads }, vec![from], shape)
    }

    pub fn residual_add(&mut self, name: &str, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].out_shape, self.nodes[b].out_shape, "residual operands differ in shape");
        let shape = self.nodes[a].out_shape.clone();
        self.push(name.into(), LayerKind::ResidualAdd, vec![a, b], shape)
    }

    pub fn activation(&mut self, name: &str, from: NodeId, act: Activation) -> NodeId {
        let shape = self.nodes[from].out_shape.clone();
        self.push(name.into(), LayerKind::Activation(act), vec![from], shape)
    }

    pub fn reshape(&mut self, name: &str, from: NodeId, shape: Vec<usize>) -> NodeId {
        let n: usize = self.nodes[from].out_shape.iter().product();
        assert_eq!(n, shape.iter().product::<usize>(), "reshape changes element count");
        self.push(name.into(), LayerKind::Reshape, vec![from], shape)
    }

    pub fn unit_power(&mut self, name: &str, from: NodeId, scope: PowerScope) -> NodeId {
        let shape = self.nodes[from].out_shape.clone();
        assert!(shape.iter().product::<usize>() % 2 == 0, "unit power needs (re, im) pairs");
        self.push(name.into(), LayerKind::UnitPower(scope), vec![from], shape)
    }

    pub fn sign_quantize(&mut self, name: &str, from: NodeId) -> NodeId {
        let shape = self.nodes[from].out_shape.clone();
        self.push(name.into(), LayerKind::SignQuantize, vec![from], shape)
    }

    /// Pre-norm transformer block with a feed-forward width equal to the
    /// embedding width.
    pub fn transformer_block(&mut self, name: &str, from: NodeId, heads: usize) -> NodeId {
        let width = self.width(from);
        let n1 = self.layer_norm(&format!("{name}.ln1"), from);
        let att = self.attention(&format!("{name}.mha"), n1, heads);
        let r1 = self.residual_add(&format!("{name}.add1"), from, att);
        let n2 = self.layer_norm(&format!("{name}.ln2"), r1);
        let f1 = self.dense(&format!("{name}.ffn1"), n2, width);
        let a = self.activation(&format!("{name}.relu"), f1, Activation::Relu);
        let f2 = self.dense(&format!("{name}.ffn2"), a, width);
        self.residual_add(&format!("{name}.add2"), r1, f2)
    }

    /// Uniform fan-in initialization of all weights; biases and norm shifts
    /// zero, norm gains one.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = derived_rng(seed, stream::INIT, 0);
        for id in 0..self.nodes.len() {
            let fan_in = self.nodes[id].inputs.first().map(|&i| self.width(i)).unwrap_or(1);
            let node = &mut self.nodes[id];
            let bound = (3.0 / fan_in as f64).sqrt();
            match node.kind {
                LayerKind::Dense { .. } | LayerKind::Conv1x1 { .. } => {
                    fill_uniform(&mut node.params[0], bound, &mut rng);
                    node.params[1].data_mut().fill(0.0);
                }
                LayerKind::MultiHeadAttention { .. } => {
                    for (i, p) in node.params.iter_mut().enumerate() {
                        if i % 2 == 0 {
                            fill_uniform(p, bound, &mut rng);
                        } else {
                            p.data_mut().fill(0.0);
                        }
                    }
                }
                LayerKind::BatchNorm { .. } | LayerKind::LayerNorm { .. } => {
                    node.params[0].data_mut().fill(1.0);
                    node.params[1].data_mut().fill(0.0);
                }
                _ => {}
            }
        }
    }

    /// Trainable parameter tensors in a fixed order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.nodes.iter().flat_map(|n| n.params.iter()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.nodes.iter_mut().flat_map(|n| n.params.iter_mut()).collect()
    }

    /// Qualified names matching [`Graph::params`].
    pub fn param_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .flat_map(|n| n.param_names().iter().map(move |p| format!("{}.{p}", n.name)))
            .collect()
    }

    pub(crate) fn state_entries(&self) -> Vec<(String, &Tensor)> {
        self.nodes
            .iter()
            .flat_map(|n| n.state_names().iter().zip(&n.state).map(move |(s, t)| (format!("{}.{s}", n.name), t)))
            .collect()
    }

    pub(crate) fn state_mut(&mut self) -> Vec<&mut Tensor> {
        self.nodes.iter_mut().flat_map(|n| n.state.iter_mut()).collect()
    }

    /// Re-creates parameter and state storage after deserialization.
    pub(crate) fn allocate(&mut self) {
        for id in 0..self.nodes.len() {
            let (p, s) = default_tensors(&self.nodes[id], self);
            self.nodes[id].params = p;
            self.nodes[id].state = s;
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// FLOPs per batch item, counted as twice the multiplications of the
    /// dense, convolution and attention products.
    pub fn flops_per_item(&self) -> usize {
        let mut total = 0;
        for node in &self.nodes {
            let rows: usize = node.out_shape[..node.out_shape.len().saturating_sub(1)].iter().product();
            match node.kind {
                LayerKind::Dense { units } | LayerKind::Conv1x1 { filters: units } => {
                    let fan_in = self.width(node.inputs[0]);
                    total += 2 * rows * fan_in * units;
                }
                LayerKind::MultiHeadAttention { .. } => {
                    let d = self.width(node.inputs[0]);
                    let t = rows;
                    // four projections plus scores and weighted sum
                    total += 2 * (4 * t * d * d + 2 * t * t * d);
                }
                _ => {}
            }
        }
        total
    }

    fn check_input(&self, input: &Tensor) -> Result<(), AutodiffError> {
        let s = input.shape();
        if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
            return Err(AutodiffError::Shape {
                node: self.nodes[0].name.clone(),
                detail: format!("expected [batch, {:?}], got {:?}", self.input_shape, s),
            });
        }
        Ok(())
    }

    /// Forward pass. In train mode the tape is kept for [`Graph::backward`].
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor, AutodiffError> {
        if self.mode == Mode::Infer {
            return self.infer(input);
        }
        self.check_input(input)?;
        let mut tape = Tape::new();
        let x = tape.input(input.clone());
        let (output, params) = self.forward_on(&mut tape, x)?;
        let out = tape.value(output).clone();
        self.cache = Some(Cache { tape, input: x, output, params });
        Ok(out)
    }

    /// Inference-mode forward; never mutates the graph.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor, AutodiffError> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let mut vals: Vec<Var> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let v = if id == 0 { x } else { self.apply(&mut tape, node, &vals, None, Mode::Infer)?.0 };
            vals.push(v);
        }
        Ok(tape.value(*vals.last().unwrap()).clone())
    }

    /// Records this graph onto an external tape, e.g. as one stage of a
    /// larger differentiable chain. Returns the output and the parameter
    /// variables (in [`Graph::params`] order). In train mode running
    /// statistics are updated.
    pub fn forward_on(&mut self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<Var>), AutodiffError> {
        let s = tape.shape(x).to_vec();
        if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
            return Err(AutodiffError::Shape {
                node: self.nodes[0].name.clone(),
                detail: format!("expected [batch, {:?}], got {:?}", self.input_shape, s),
            });
        }
        let mode = self.mode;
        let mut vals: Vec<Var> = Vec::with_capacity(self.nodes.len());
        let mut params = Vec::new();
        let mut updates: Vec<(NodeId, Vec<Tensor>)> = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if id == 0 {
                vals.push(x);
                continue;
            }
            let pv: Vec<Var> = node.params.iter().map(|p| tape.param(p.clone())).collect();
            let (v, new_state) = self.apply(tape, node, &vals, Some(&pv), mode)?;
            if let Some(st) = new_state {
                updates.push((id, st));
            }
            params.extend(pv);
            vals.push(v);
        }
        for (id, st) in updates {
            self.nodes[id].state = st;
        }
        Ok((*vals.last().unwrap(), params))
    }

    /// Gradients of the cached train-mode forward for the given output
    /// gradient.
    pub fn backward(&mut self, out_grad: &Tensor) -> Result<GraphGrads, AutodiffError> {
        let cache = self.cache.as_ref().ok_or(AutodiffError::NoForward)?;
        let mut grads = cache.tape.backward_with(cache.output, out_grad.clone())?;
        let params = cache
            .params
            .iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(cache.tape.shape(v))))
            .collect();
        let input = grads.take(cache.input).unwrap_or_else(|| Tensor::zeros(cache.tape.shape(cache.input)));
        Ok(GraphGrads { params, input })
    }

    /// Applies an Adam step using gradients in [`Graph::params`] order.
    pub fn apply_gradients(&mut self, opt: &mut super::Adam, grads: &[Tensor]) -> Result<(), AutodiffError> {
        let names = self.param_names();
        let mut params = self.params_mut();
        opt.step(&mut params, grads, &names)
    }

    /// Sets the frozen unit-power estimate of every batch-scope unit-power
    /// layer from one inference pass over `input` (for the modulator: all bit
    /// patterns).
    pub fn calibrate_power(&mut self, input: &Tensor) -> Result<(), AutodiffError> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let mut vals: Vec<Var> = Vec::with_capacity(self.nodes.len());
        for id in 0..self.nodes.len() {
            if id == 0 {
                vals.push(x);
                continue;
            }
            if self.nodes[id].kind == LayerKind::UnitPower(PowerScope::Batch) {
                let t = tape.value(vals[self.nodes[id].inputs[0]]);
                let p = 2.0 * t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
                self.nodes[id].state[0] = Tensor::scalar(p);
            }
            let v = self.apply(&mut tape, &self.nodes[id], &vals, None, Mode::Infer)?.0;
            vals.push(v);
        }
        Ok(())
    }

    /// Evaluates one node. With `pv == None` parameters enter as constants.
    /// Returns the new node state when running statistics were updated.
    fn apply(
        &self,
        tape: &mut Tape,
        node: &Node,
        vals: &[Var],
        pv: Option<&[Var]>,
        mode: Mode,
    ) -> Result<(Var, Option<Vec<Tensor>>), AutodiffError> {
        let shape_err = |detail: String| AutodiffError::Shape { node: node.name.clone(), detail };
        let owned: Vec<Var>;
        let p: &[Var] = match pv {
            Some(p) => p,
            None => {
                owned = node.params.iter().map(|t| tape.constant(t.clone())).collect();
                &owned
            }
        };
        let x = vals[node.inputs[0]];
        let batch = tape.shape(x)[0];
        let with_batch = |s: &[usize]| {
            let mut v = vec![batch];
            v.extend_from_slice(s);
            v
        };
        let rename = |e: AutodiffError| match e {
            AutodiffError::Shape { detail, .. } => shape_err(detail),
            other => other,
        };
        let out = match &node.kind {
            LayerKind::Input => x,
            LayerKind::Dense { .. } | LayerKind::Conv1x1 { .. } => {
                let h = tape.matmul(x, p[0]).map_err(rename)?;
                tape.add_bias(h, p[1]).map_err(rename)?
            }
            LayerKind::BatchNorm { eps, momentum } => {
                if mode == Mode::Train {
                    let (n, mean, var) = tape.batch_norm(x, *eps);
                    let rows = tape.value(x).rows() as f64;
                    let unbias = if rows > 1.0 { rows / (rows - 1.0) } else { 1.0 };
                    let rm: Vec<f64> = node.state[0]
                        .data()
                        .iter()
                        .zip(&mean)
                        .map(|(r, m)| momentum * r + (1.0 - momentum) * m)
                        .collect();
                    let rv: Vec<f64> = node.state[1]
                        .data()
                        .iter()
                        .zip(&var)
                        .map(|(r, v)| momentum * r + (1.0 - momentum) * v * unbias)
                        .collect();
                    let g = tape.mul_bias(n, p[0]).map_err(rename)?;
                    let out = tape.add_bias(g, p[1]).map_err(rename)?;
                    return Ok((out, Some(vec![Tensor::from_vec(rm), Tensor::from_vec(rv)])));
                }
                let inv: Vec<f64> = node.state[1].data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let shift: Vec<f64> = node.state[0].data().iter().zip(&inv).map(|(m, i)| -m * i).collect();
                let sv = tape.constant(Tensor::from_vec(inv));
                let bv = tape.constant(Tensor::from_vec(shift));
                let n = tape.mul_bias(x, sv).map_err(rename)?;
                let n = tape.add_bias(n, bv).map_err(rename)?;
                let g = tape.mul_bias(n, p[0]).map_err(rename)?;
                tape.add_bias(g, p[1]).map_err(rename)?
            }
            LayerKind::LayerNorm { eps } => {
                let n = tape.layer_norm(x, *eps);
                let g = tape.mul_bias(n, p[0]).map_err(rename)?;
                tape.add_bias(g, p[1]).map_err(rename)?
            }
            LayerKind::MultiHeadAttention { heads } => attention(tape, x, p, *heads).map_err(rename)?,
            LayerKind::ResidualAdd => tape.add(x, vals[node.inputs[1]]).map_err(rename)?,
            LayerKind::Activation(a) => match a {
                Activation::Relu => tape.relu(x),
                Activation::Sigmoid => tape.sigmoid(x),
                Activation::Softmax => tape.softmax(x),
            },
            LayerKind::Reshape => tape.reshape(x, with_batch(&node.out_shape)).map_err(rename)?,
            LayerKind::UnitPower(scope) => {
                let len = tape.value(x).len();
                match scope {
                    PowerScope::PerItem => {
                        let per = len / batch.max(1);
                        let flat = tape.reshape(x, vec![batch, per]).map_err(rename)?;
                        let sq = tape.pow(flat, 2.0);
                        let s = tape.sum_last(sq);
                        let pw = tape.scale(s, 2.0 / per as f64);
                        let eps = tape.constant(Tensor::filled(&[batch], 1e-30));
                        let pw = tape.add(pw, eps).map_err(rename)?;
                        let inv = tape.pow(pw, -0.5);
                        let y = tape.mul_rows(flat, inv).map_err(rename)?;
                        tape.reshape(y, with_batch(&node.out_shape)).map_err(rename)?
                    }
                    PowerScope::Batch if mode == Mode::Train => {
                        let sq = tape.pow(x, 2.0);
                        let m = tape.mean_all(sq);
                        let pw = tape.scale(m, 2.0);
                        let batch_power = tape.value(pw).data()[0];
                        let eps = tape.constant(Tensor::scalar(1e-30));
                        let pw = tape.add(pw, eps).map_err(rename)?;
                        let inv = tape.pow(pw, -0.5);
                        let out = tape.mul_scalar(x, inv).map_err(rename)?;
                        let r = node.state[0].data()[0];
                        let new = 0.9 * r + 0.1 * batch_power;
                        return Ok((out, Some(vec![Tensor::scalar(new)])));
                    }
                    PowerScope::Batch => tape.scale(x, 1.0 / node.state[0].data()[0].max(1e-30).sqrt()),
                }
            }
            LayerKind::SignQuantize => tape.sign_ste(x),
        };
        Ok((out, None))
    }
}

fn default_tensors(node: &Node, g: &Graph) -> (Vec<Tensor>, Vec<Tensor>) {
    let fan_in = node.inputs.first().map(|&i| g.width(i)).unwrap_or(0);
    let width = *node.out_shape.last().unwrap_or(&1);
    match node.kind {
        LayerKind::Dense { units } | LayerKind::Conv1x1 { filters: units } => {
            (vec![Tensor::zeros(&[fan_in, units]), Tensor::zeros(&[units])], vec![])
        }
        LayerKind::BatchNorm { .. } => (
            vec![Tensor::filled(&[width], 1.0), Tensor::zeros(&[width])],
            vec![Tensor::zeros(&[width]), Tensor::filled(&[width], 1.0)],
        ),
        LayerKind::LayerNorm { .. } => (vec![Tensor::filled(&[width], 1.0), Tensor::zeros(&[width])], vec![]),
        LayerKind::MultiHeadAttention { .. } => {
            let mut p = Vec::new();
            for _ in 0..4 {
                p.push(Tensor::zeros(&[width, width]));
                p.push(Tensor::zeros(&[width]));
            }
            (p, vec![])
        }
        LayerKind::UnitPower(PowerScope::Batch) => (vec![], vec![Tensor::scalar(1.0)]),
        _ => (vec![], vec![]),
    }
}

fn fill_uniform<R: Rng>(t: &mut Tensor, bound: f64, rng: &mut R) {
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
}

fn attention(tape: &mut Tape, x: Var, p: &[Var], heads: usize) -> Result<Var, AutodiffError> {
    let s = tape.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let proj = |tape: &mut Tape, w: Var, bias: Var| -> Result<Var, AutodiffError> {
        let h = tape.matmul(x, w)?;
        let h = tape.add_bias(h, bias)?;
        tape.reshape(h, vec![b, t, heads, dh])
    };
    let q = proj(tape, p[0], p[1])?;
    let k = proj(tape, p[2], p[3])?;
    let v = proj(tape, p[4], p[5])?;
    let q = tape.permute(q, &[0, 2, 1, 3])?;
    let q = tape.reshape(q, vec![b * heads, t, dh])?;
    let k = tape.permute(k, &[0, 2, 3, 1])?;
    let k = tape.reshape(k, vec![b * heads, dh, t])?;
    let v = tape.permute(v, &[0, 2, 1, 3])?;
    let v = tape.reshape(v, vec![b * heads, t, dh])?;
    let scores = tape.bmm(q, k)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let att = tape.softmax(scores);
    let o = tape.bmm(att, v)?;
    let o = tape.reshape(o, vec![b, heads, t, dh])?;
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    let o = tape.reshape(o, vec![b, t, d])?;
    let o = tape.matmul(o, p[6])?;
    tape.add_bias(o, p[7])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_identity() {
        let mut g = Graph::new(vec![3]);
        let d = g.dense("d", 0, 3);
        let w = &mut g.nodes[d].params[0];
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let y = g.infer(&Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn relu_and_softmax() {
        let mut g = Graph::new(vec![3]);
        g.activation("r", 0, Activation::Relu);
        let y = g.infer(&Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);

        let mut g = Graph::new(vec![2]);
        g.activation("s", 0, Activation::Softmax);
        let y = g.infer(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn input_shape_error_names_node() {
        let g = Graph::new(vec![3]);
        let err = g.infer(&Tensor::zeros(&[1, 4])).unwrap_err();
        assert!(err.to_string().contains("input"), "{err}");
    }

    #[test]
    fn backward_before_forward_fails() {
        let mut g = Graph::new(vec![1]);
        g.dense("d", 0, 1);
        assert!(matches!(g.backward(&Tensor::zeros(&[1, 1])), Err(AutodiffError::NoForward)));
    }

    #[test]
    fn scalar_dense_gradient() {
        let mut g = Graph::new(vec![1]);
        let d = g.dense("d", 0, 1);
        g.nodes[d].params[0].data_mut()[0] = 0.7;
        g.set_mode(Mode::Train);
        g.forward(&Tensor::new(vec![1, 1], vec![3.0]).unwrap()).unwrap();
        let grads = g.backward(&Tensor::new(vec![1, 1], vec![1.0]).unwrap()).unwrap();
        assert_eq!(grads.params[0].data(), &[3.0]);
        assert_eq!(grads.params[1].data(), &[1.0]);
        assert_eq!(grads.input.data(), &[0.7]);
    }

    #[test]
    fn infer_leaves_state_untouched() {
        let mut g = Graph::new(vec![4]);
        let b = g.batch_norm("bn", 0);
        g.unit_power("p", b, PowerScope::Batch);
        g.init_weights(3);
        let before: Vec<Tensor> = g.state_entries().into_iter().map(|(_, t)| t.clone()).collect();
        let x = Tensor::new(vec![2, 4], (0..8).map(|v| v as f64).collect()).unwrap();
        let a = g.infer(&x).unwrap();
        let b2 = g.infer(&x).unwrap();
        assert_eq!(a, b2);
        let after: Vec<Tensor> = g.state_entries().into_iter().map(|(_, t)| t.clone()).collect();
        assert_eq!(before, after);
    }
}
