//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes; each op pushes its output
//! after its operands, so reverse insertion order is a valid reverse
//! topological order. Build one graph per forward pass and drop it once
//! the gradients have been read.

use crate::error::{dim_err, Error, Result};
use crate::ops;
use crate::tensor::{ConvSpec, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, spec: ConvSpec },
    ChannelBias { input: Var, bias: Var },
    MaxPool { input: Var, argmax: Vec<usize> },
    MatVec { weight: Var, input: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat { a: Var, b: Var, axis: usize },
    Channel { input: Var, index: usize },
    Dot(Var, Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`]. Only leaves that
/// were created with `requires_grad` and reach the loss carry a value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, operands: &[Var]) -> Result<Var> {
        value.ensure_finite(op_name(&op))?;
        let requires_grad = operands.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, spec: ConvSpec) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(kernel), spec)?;
        self.push(out, Op::Conv2d { input, kernel, spec }, &[input, kernel])
    }

    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let out = ops::add_channel_bias(self.value(input), self.value(bias))?;
        self.push(out, Op::ChannelBias { input, bias }, &[input, bias])
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = ops::maxpool2d(self.value(input), window, stride)?;
        self.push(out, Op::MaxPool { input, argmax }, &[input])
    }

    pub fn matvec(&mut self, weight: Var, input: Var) -> Result<Var> {
        let out = ops::matvec(self.value(weight), self.value(input))?;
        self.push(out, Op::MatVec { weight, input }, &[weight, input])
    }

    /// `weight · input + bias`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let prod = self.matvec(weight, input)?;
        self.add(prod, bias)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(dim_err!("{what}: shapes {sa:?} and {sb:?} differ"));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(ops::sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let out = ops::concat(self.value(a), self.value(b), axis)?;
        self.push(out, Op::Concat { a, b, axis }, &[a, b])
    }

    /// Concatenates one-dimensional values end to end.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::Usage("stack of zero tensors".into()))?;
        rest.iter().try_fold(first, |acc, &p| self.concat(acc, p, 0))
    }

    /// Channel `index` of an `H×W×C` value as a flat `[H·W]` vector.
    pub fn channel(&mut self, input: Var, index: usize) -> Result<Var> {
        let out = ops::channel(self.value(input), index)?;
        self.push(out, Op::Channel { input, index }, &[input])
    }

    /// Inner product, as a one-element tensor.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(dim_err!(
                "dot: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        self.push(Tensor::scalar(s), Op::Dot(a, b), &[a, b])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.value(loss);
        if !root.is_scalar() {
            return Err(Error::Usage(format!(
                "backward() needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(root.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |var: Var, delta: Tensor| {
            if !self.nodes[var.0].requires_grad {
                return;
            }
            match &mut grads[var.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| self.value(v);
        match node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, spec } => {
                let (gx, gk) = ops::conv2d_backward(val(input), val(kernel), spec, g)?;
                acc(input, gx);
                acc(kernel, gk);
            }
            Op::ChannelBias { input, bias } => {
                acc(bias, ops::channel_bias_backward(g, val(bias).len()));
                acc(input, g.clone());
            }
            Op::MaxPool { input, ref argmax } => {
                acc(input, ops::maxpool2d_backward(val(input).shape(), argmax, g));
            }
            Op::MatVec { weight, input } => {
                let (gw, gx) = ops::matvec_backward(val(weight), val(input), g);
                acc(weight, gw);
                acc(input, gx);
            }
            Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(a, hadamard(g, val(b)));
                acc(b, hadamard(g, val(a)));
            }
            Op::Scale(a, factor) => acc(a, g.map(|v| v * factor)),
            Op::Relu(a) => {
                let data = g
                    .data()
                    .iter()
                    .zip(val(a).data())
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                acc(a, Tensor::new(g.shape(), data)?);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(a, zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv)));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(a, zip_map(g, y, |gv, yv| gv * (1.0 - yv * yv)));
            }
            Op::Concat { a, b, axis } => {
                let (ga, gb) = ops::concat_backward(val(a).shape(), val(b).shape(), axis, g);
                acc(a, ga);
                acc(b, gb);
            }
            Op::Channel { input, index } => {
                acc(input, ops::channel_backward(val(input).shape(), index, g));
            }
            Op::Dot(a, b) => {
                let s = g.item();
                acc(a, val(b).map(|v| v * s));
                acc(b, val(a).map(|v| v * s));
            }
            Op::Sum(a) => acc(a, Tensor::full(val(a).shape(), g.item())),
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).unwrap()
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |x, y| x * y)
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::ChannelBias { .. } => "channel bias",
        Op::MaxPool { .. } => "maxpool2d",
        Op::MatVec { .. } => "matvec",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Tanh(_) => "tanh",
        Op::Concat { .. } => "concat",
        Op::Channel { .. } => "channel",
        Op::Dot(..) => "dot",
        Op::Sum(_) => "sum",
    }
}
