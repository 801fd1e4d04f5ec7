//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order. [`Graph::backward`] walks that record in reverse, applying each
//! op's backward rule, and accumulates gradients into leaves that were
//! created with `requires_grad = true`.

mod conv;
mod elementwise;
mod linalg;
mod norm;
mod reduce;
mod shape;
mod wbce;

pub use conv::{conv_out_extent, ConvGeom};
pub use elementwise::{BinaryKind, UnaryKind};
pub use norm::BatchStats;
pub use reduce::ReduceKind;
pub use shape::{permute_index, GATHER_ZERO};
pub use wbce::PROB_EPS;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate corruption of a backward rule, used to prove that the
/// gradient checker catches broken derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    TanhBackward,
}

pub(crate) enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Reduce {
        kind: ReduceKind,
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Softmax {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Wbce {
        pred: Var,
        dpred: Vec<T>,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) op: Op<T>,
}

/// Append-only record of tensor operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients reach it only if `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (a leaf that never receives gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Domain(format!(
                "{} produced a non-finite value",
                op_name(&op)
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Back-propagates from a scalar `loss`, accumulating (`+=`) into the
    /// gradient of every reachable leaf that requires it.
    /// Which branch every piecewise op took: the sign of each ReLU input
    /// and each max/max-pool argmax. Two evaluations with equal signatures
    /// lie on the same smooth piece.
    pub fn branch_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Unary {
                    kind: UnaryKind::Relu,
                    x,
                } => sig.extend(self.nodes[x.0].value.data().iter().map(|&v| usize::from(v > T::zero()))),
                Op::Reduce { argmax, .. } | Op::MaxPool2d { argmax, .. } => sig.extend_from_slice(argmax),
                _ => {}
            }
        }
        sig
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &d)| *a += d),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut sink = GradSink {
            nodes: &self.nodes,
            grads,
        };
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Binary { kind, a, b } => elementwise::binary_backward(self, *kind, *a, *b, g, &mut sink),
            Op::Unary { kind, x } => {
                elementwise::unary_backward(self, *kind, *x, &node.value, g, self.fault, &mut sink)
            }
            Op::MatMul { a, b } => linalg::matmul_backward(self, *a, *b, g, &mut sink),
            Op::BatchMatMul { a, b, transpose_b } => {
                linalg::bmm_backward(self, *a, *b, *transpose_b, g, &mut sink)
            }
            Op::Reduce {
                kind,
                x,
                axis,
                argmax,
            } => reduce::reduce_backward(self, *kind, *x, *axis, argmax, g, &mut sink),
            Op::Reshape { x } => sink.add(*x, g),
            Op::Gather { x, index } => shape::gather_backward(*x, index, g, &mut sink),
            Op::Concat { inputs, axis } => shape::concat_backward(self, inputs, *axis, g, &mut sink),
            Op::Softmax { x } => reduce::softmax_backward(*x, &node.value, g, &mut sink),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => conv::conv2d_backward(self, *x, *w, *b, geom, cols, g, &mut sink),
            Op::ConvTranspose2d { x, w, b, geom } => {
                conv::conv_transpose2d_backward(self, *x, *w, *b, geom, g, &mut sink)
            }
            Op::MaxPool2d { x, argmax } => conv::max_pool_backward(*x, argmax, g, &mut sink),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => norm::batch_norm_backward(
                self, *x, *gamma, *beta, xhat, inv_std, *batch_stats, g, &mut sink,
            ),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => norm::layer_norm_backward(self, *x, *gamma, *beta, xhat, inv_std, g, &mut sink),
            Op::Wbce { pred, dpred } => wbce::wbce_backward(*pred, dpred, g, &mut sink),
        }
    }
}

/// Lazily allocated gradient buffers for the inputs of the op being
/// back-propagated.
pub(crate) struct GradSink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Scalar> GradSink<'_, T> {
    /// Mutable gradient buffer for `v`, or `None` if `v` needs no gradient.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let numel = node.value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); numel]))
    }

    pub(crate) fn add(&mut self, v: Var, g: &[T]) {
        if let Some(slot) = self.slot(v) {
            slot.iter_mut().zip(g).for_each(|(a, &d)| *a += d);
        }
    }

    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Binary { kind, .. } => kind.name(),
        Op::Unary { kind, .. } => kind.name(),
        Op::MatMul { .. } => "matmul",
        Op::BatchMatMul { .. } => "bmm",
        Op::Reduce { kind, .. } => kind.name(),
        Op::Reshape { .. } => "reshape",
        Op::Gather { .. } => "gather",
        Op::Concat { .. } => "concat",
        Op::Softmax { .. } => "softmax",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvTranspose2d { .. } => "conv_transpose2d",
        Op::MaxPool2d { .. } => "max_pool2d",
        Op::BatchNorm { .. } => "batch_norm",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Wbce { .. } => "wbce",
    }
}
