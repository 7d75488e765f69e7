//! Tape-based reverse-mode differentiation.
//!
//! Forward values are computed eagerly when an operation is recorded, so shape
//! errors surface at record time. [`Tape::backward`] walks the tape in reverse
//! and returns gradients for parameters only; inputs are treated as frozen.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::tensor::{conv2d, conv2d_backward, Tensor};

/// Handle to a node on one tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A primitive together with its inputs and constants.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Param,
    MatMul(VarId, VarId),
    Add(VarId, VarId),
    Hadamard(VarId, VarId),
    Exp(VarId),
    Scale(VarId, f64),
    Reshape(VarId, Vec<usize>),
    Transpose(VarId),
    Conv2d {
        input: VarId,
        kernel: VarId,
        stride: usize,
        pad: usize,
    },
    /// Adds a per-channel bias along axis 1 of a rank-2 or rank-4 value.
    AddBias { x: VarId, bias: VarId },
    Relu(VarId),
    Sum(VarId),
    /// Mean softmax cross-entropy of `(batch, classes)` logits.
    SoftmaxXent { logits: VarId, labels: Vec<usize> },
}

impl Op {
    fn inputs(&self) -> Vec<VarId> {
        match self {
            Op::Input | Op::Param => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Hadamard(a, b) => vec![*a, *b],
            Op::Exp(a) | Op::Scale(a, _) | Op::Reshape(a, _) | Op::Transpose(a) | Op::Relu(a) | Op::Sum(a) => {
                vec![*a]
            }
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::SoftmaxXent { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
}

/// Gradients of the parameters reached by one backward pass.
pub type Gradients = BTreeMap<VarId, Tensor>;

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<VarId>,
}

/// Stable `(loss, softmax probabilities)` of mean cross-entropy.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let [batch, classes] = *logits.dims() else {
        return Err(Error::InvalidShape {
            dims: logits.dims().to_vec(),
            reason: "logits must be batch x classes",
        });
    };
    if labels.len() != batch {
        return Err(invalid("label count differs from batch size"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(invalid(alloc::format!("label {bad} out of range for {classes} classes")));
    }
    let z = logits.data();
    let mut probs = vec![0.0; batch * classes];
    let mut total = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let row = &z[b * classes..(b + 1) * classes];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut denom = 0.0;
        for (p, &v) in probs[b * classes..].iter_mut().zip(row) {
            *p = libm::exp(v - max);
            denom += *p;
        }
        for p in &mut probs[b * classes..(b + 1) * classes] {
            *p /= denom;
        }
        total += libm::log(denom) - (row[y] - max);
    }
    Ok((total / batch as f64, probs))
}

fn add_bias_forward(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let dims = x.dims();
    let channels = match dims.len() {
        2 | 4 => dims[1],
        _ => {
            return Err(Error::InvalidShape {
                dims: dims.to_vec(),
                reason: "bias needs a rank-2 or rank-4 input",
            })
        }
    };
    if bias.dims() != [channels] {
        return Err(Error::ShapeMismatch {
            op: "add_bias",
            left: dims.to_vec(),
            right: bias.dims().to_vec(),
        });
    }
    let inner: usize = dims[2..].iter().product();
    let b = bias.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + b[(i / inner) % channels])
        .collect();
    Tensor::from_vec_dtype(dims, data, x.dtype())
}

fn bias_grad(grad: &Tensor, channels: usize) -> Result<Tensor> {
    let inner: usize = grad.dims()[2..].iter().product();
    let mut out = vec![0.0; channels];
    for (i, &g) in grad.data().iter().enumerate() {
        out[(i / inner) % channels] += g;
    }
    Tensor::from_vec_dtype(&[channels], out, grad.dtype())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn node(&self, id: VarId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &[VarId] {
        &self.params
    }

    pub fn is_param(&self, id: VarId) -> bool {
        self.params.contains(&id)
    }

    fn push(&mut self, op: Op, value: Tensor) -> VarId {
        self.nodes.push(Node { op, value });
        VarId(self.nodes.len() - 1)
    }

    /// Frozen value: never receives a gradient.
    pub fn input(&mut self, tensor: Tensor) -> VarId {
        self.push(Op::Input, tensor)
    }

    /// Trainable leaf.
    pub fn param(&mut self, tensor: Tensor) -> VarId {
        let id = self.push(Op::Param, tensor);
        self.params.push(id);
        id
    }

    fn check(&self, id: VarId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(invalid("unknown VarId"));
        }
        Ok(())
    }

    /// Evaluates `op` on stored values and appends it.
    pub fn record(&mut self, op: Op) -> Result<VarId> {
        for id in op.inputs() {
            self.check(id)?;
        }
        let v = |id: VarId| &self.nodes[id.0].value;
        let value = match &op {
            Op::Input | Op::Param => return Err(invalid("leaves are created with input/param")),
            Op::MatMul(a, b) => v(*a).matmul(v(*b))?,
            Op::Add(a, b) => v(*a).add(v(*b))?,
            Op::Hadamard(a, b) => v(*a).hadamard(v(*b))?,
            Op::Exp(a) => v(*a).map_exp()?,
            Op::Scale(a, s) => v(*a).scale(*s)?,
            Op::Reshape(a, dims) => v(*a).reshape(dims)?,
            Op::Transpose(a) => v(*a).transpose()?,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => conv2d(v(*input), v(*kernel), *stride, *pad)?,
            Op::AddBias { x, bias } => add_bias_forward(v(*x), v(*bias))?,
            Op::Relu(a) => v(*a).relu()?,
            Op::Sum(a) => Tensor::scalar(v(*a).sum())?.to_dtype(v(*a).dtype()),
            Op::SoftmaxXent { logits, labels } => {
                let (loss, _) = softmax_xent(v(*logits), labels)?;
                Tensor::scalar(loss)?.to_dtype(v(*logits).dtype())
            }
        };
        Ok(self.push(op, value))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.record(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.record(Op::Add(a, b))
    }

    pub fn hadamard(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.record(Op::Hadamard(a, b))
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId> {
        self.record(Op::Exp(a))
    }

    pub fn scale(&mut self, a: VarId, s: f64) -> Result<VarId> {
        self.record(Op::Scale(a, s))
    }

    pub fn reshape(&mut self, a: VarId, dims: &[usize]) -> Result<VarId> {
        self.record(Op::Reshape(a, dims.to_vec()))
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        self.record(Op::Transpose(a))
    }

    pub fn conv2d(&mut self, input: VarId, kernel: VarId, stride: usize, pad: usize) -> Result<VarId> {
        self.record(Op::Conv2d {
            input,
            kernel,
            stride,
            pad,
        })
    }

    pub fn add_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        self.record(Op::AddBias { x, bias })
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        self.record(Op::Relu(a))
    }

    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        self.record(Op::Sum(a))
    }

    pub fn softmax_xent(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        self.record(Op::SoftmaxXent {
            logits,
            labels: labels.to_vec(),
        })
    }

    /// Reverse sweep from a one-element `loss`. Every parameter gets an entry,
    /// zero when the loss does not depend on it.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(invalid("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).dims(), 1.0, self.value(loss).dtype())?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Param) {
                grads[idx] = Some(g);
                continue;
            }
            for (target, contribution) in self.vjp(node, &g)? {
                let slot = &mut grads[target.0];
                *slot = Some(match slot.take() {
                    Some(prev) => prev.add(&contribution)?,
                    None => contribution,
                });
            }
        }

        let mut out = Gradients::new();
        for &p in &self.params {
            let g = match grads.get_mut(p.0).and_then(Option::take) {
                Some(g) => g,
                None => self.value(p).zeros_like(),
            };
            out.insert(p, g);
        }
        Ok(out)
    }

    /// Contributions of `node`'s output gradient `g` to each of its inputs.
    fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<(VarId, Tensor)>> {
        let v = |id: VarId| &self.nodes[id.0].value;
        Ok(match &node.op {
            Op::Input | Op::Param => vec![],
            Op::MatMul(a, b) => vec![
                (*a, g.matmul(&v(*b).transpose()?)?),
                (*b, v(*a).transpose()?.matmul(g)?),
            ],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Hadamard(a, b) => vec![(*a, g.hadamard(v(*b))?), (*b, g.hadamard(v(*a))?)],
            Op::Exp(a) => vec![(*a, g.hadamard(&node.value)?)],
            Op::Scale(a, s) => vec![(*a, g.scale(*s)?)],
            Op::Reshape(a, _) => vec![(*a, g.reshape(v(*a).dims())?)],
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let (d_in, d_k) = conv2d_backward(v(*input), v(*kernel), g, *stride, *pad)?;
                vec![(*input, d_in), (*kernel, d_k)]
            }
            Op::AddBias { x, bias } => {
                vec![(*x, g.clone()), (*bias, bias_grad(g, v(*bias).numel())?)]
            }
            Op::Relu(a) => vec![(*a, g.zip_map(v(*a), "relu_backward", |g, x| if x > 0.0 { g } else { 0.0 })?)],
            Op::Sum(a) => {
                let up = g.item()?;
                vec![(*a, Tensor::full(v(*a).dims(), up, v(*a).dtype())?)]
            }
            Op::SoftmaxXent { logits, labels } => {
                let z = v(*logits);
                let (_, mut probs) = softmax_xent(z, labels)?;
                let classes = z.dims()[1];
                let scale = g.item()? / labels.len() as f64;
                for (b, &y) in labels.iter().enumerate() {
                    probs[b * classes + y] -= 1.0;
                }
                probs.iter_mut().for_each(|p| *p *= scale);
                vec![(*logits, Tensor::from_vec_dtype(z.dims(), probs, z.dtype())?)]
            }
        })
    }
}
