//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node whose inputs are earlier nodes, so the tape is
//! already in topological order and backward is a single reverse sweep.

mod kernels;

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{numel, Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An op together with its non-tensor attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    /// `(..., m, k) · (k, n)` or batched `(..., m, k) · (..., k, n)`; with
    /// `trans_b` the right operand is stored as `(n, k)`.
    MatMul {
        trans_b: bool,
    },
    /// Elementwise; the right operand may match a trailing suffix of the left.
    Add,
    Mul,
    /// Row gather from a `(rows, d)` table; output is `batch_shape + [d]`.
    EmbedLookup {
        ids: Vec<usize>,
        batch_shape: Vec<usize>,
    },
    /// Over the last axis; `causal` zeroes entries above the diagonal of the
    /// trailing square block.
    Softmax {
        causal: bool,
    },
    Silu,
    /// Inputs: x, gain, bias. Population statistics over the last axis.
    LayerNorm {
        eps: f64,
    },
    /// Inputs: x, gain.
    RmsNorm {
        eps: f64,
    },
    /// Mean token cross-entropy over rows whose target is `Some`.
    CrossEntropy {
        targets: Vec<Option<usize>>,
    },
    Transpose {
        perm: Vec<usize>,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Mean {
        axis: Option<usize>,
    },
    Sum {
        axis: Option<usize>,
    },
    Concat {
        axis: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    EmbedLookup,
    Softmax,
    Silu,
    LayerNorm,
    RmsNorm,
    CrossEntropy,
    Transpose,
    Reshape,
    Mean,
    Sum,
    Concat,
}

impl OpKind {
    /// Every kind that records a differentiable computation.
    pub const RECORDED: [OpKind; 14] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::EmbedLookup,
        OpKind::Softmax,
        OpKind::Silu,
        OpKind::LayerNorm,
        OpKind::RmsNorm,
        OpKind::CrossEntropy,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::Concat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::EmbedLookup => "embed_lookup",
            OpKind::Softmax => "softmax",
            OpKind::Silu => "silu",
            OpKind::LayerNorm => "layer_norm",
            OpKind::RmsNorm => "rms_norm",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Concat => "concat",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add => OpKind::Add,
            Op::Mul => OpKind::Mul,
            Op::EmbedLookup { .. } => OpKind::EmbedLookup,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Silu => OpKind::Silu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::RmsNorm { .. } => OpKind::RmsNorm,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Mean { .. } => OpKind::Mean,
            Op::Sum { .. } => OpKind::Sum,
            Op::Concat { .. } => OpKind::Concat,
        }
    }
}

struct Node<T> {
    op: Op,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    value: Vec<T>,
    saved: Vec<T>,
    requires_grad: bool,
}

/// Recording of one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears all nodes and gradients so the tape can record again.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    /// Records a copy of `t`; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::BufferShape {
                shape,
                len: data.len(),
            });
        }
        Ok(self.push_leaf(shape, data, false))
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.push_leaf(Vec::new(), vec![v], false)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape,
            value,
            saved: Vec::new(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Runs `op` forward on `inputs` and records it.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let ins: Vec<kernels::Input<'_, T>> = inputs
            .iter()
            .map(|v| {
                let n = &self.nodes[v.0];
                (n.shape.as_slice(), n.value.as_slice())
            })
            .collect();
        let out = kernels::forward(&op, &ins)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.0).collect(),
            shape: out.shape,
            value: out.value,
            saved: out.saved,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Detached copy of a node's value.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node buffers match their shapes")
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient recorded for `v` into `t`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<T>) -> Result<bool> {
        match self.grad(v) {
            Some(g) if t.requires_grad() => {
                t.accumulate_grad(g)?;
                Ok(true)
            }
            _ => Ok(false),
        }
    }

    /// Back-propagates from a scalar `loss`. Only nodes that require
    /// gradients get one; intermediate gradients are dropped once consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_node.shape.clone()));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !loss_node.requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&j| self.nodes[j].requires_grad)
                .collect();
            let ins: Vec<kernels::Input<'_, T>> = node
                .inputs
                .iter()
                .map(|&j| {
                    (
                        self.nodes[j].shape.as_slice(),
                        self.nodes[j].value.as_slice(),
                    )
                })
                .collect();
            let in_grads = kernels::backward(&node.op, &ins, &node.value, &node.saved, &g, &needs);
            for (&j, gj) in node.inputs.iter().zip(in_grads) {
                let Some(gj) = gj else { continue };
                match &mut self.grads[j] {
                    Some(acc) => acc.iter_mut().zip(&gj).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(gj),
                }
            }
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul { trans_b: false }, &[a, b])
    }

    /// `a · bᵀ` with `b` stored row-major as `(n, k)`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul { trans_b: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let s = self.scalar(T::lit(factor));
        self.mul(a, s)
    }

    pub fn embed(&mut self, table: Var, ids: Vec<usize>, batch_shape: Vec<usize>) -> Result<Var> {
        self.apply(Op::EmbedLookup { ids, batch_shape }, &[table])
    }

    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        self.apply(Op::Softmax { causal }, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Silu, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.apply(Op::LayerNorm { eps }, &[x, gain, bias])
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        self.apply(Op::RmsNorm { eps }, &[x, gain])
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Result<Var> {
        self.apply(Op::CrossEntropy { targets }, &[logits])
    }

    pub fn transpose(&mut self, x: Var, perm: Vec<usize>) -> Result<Var> {
        self.apply(Op::Transpose { perm }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Op::Reshape { shape }, &[x])
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.apply(Op::Mean { axis }, &[x])
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.apply(Op::Sum { axis }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, xs)
    }
}
