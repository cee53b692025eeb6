//! Reverse-mode differentiation tape.
//!
//! The tape is an append-only arena of nodes. Each differentiable
//! operation pushes one node holding its output value plus a boxed op
//! record that knows how to turn the output gradient into input
//! gradients. `backward` walks the nodes in exact reverse execution
//! order and accumulates gradients additively.
//!
//! A tape is a single logical thread; values are immutable once pushed.
//! Independent tapes share no state and may live on separate threads.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Option<Box<dyn TapeOp + Send + Sync>>,
}

/// Read-only access to node values during the backward sweep.
pub struct Values<'a> {
    nodes: &'a [Node],
}

impl<'a> Values<'a> {
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }
}

/// A recorded operation: which vars fed it and how gradients flow back.
pub trait TapeOp {
    fn name(&self) -> &'static str;

    fn inputs(&self) -> Vec<Var>;

    /// Gradient of the loss w.r.t. each input, given the gradient w.r.t.
    /// the output. `None` entries mean the op is not differentiable in
    /// that argument (the tape skips accumulation).
    fn grads(&self, vals: &Values<'_>, out: &Tensor, out_grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor that does not need a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// Registers a trainable input; `backward` will produce its gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.input(value, true)
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: None,
        });
        Var(id)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar convenience accessor.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Gradient of the last `backward` root w.r.t. `v`, if one was
    /// accumulated.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Pushes an op output. Rejects non-finite values so numerical blowups
    /// surface at the op that produced them, never silently downstream.
    pub(crate) fn push(&mut self, value: Tensor, op: Box<dyn TapeOp + Send + Sync>) -> Result<Var> {
        if let Some(idx) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: op.name(),
                index: idx,
            });
        }
        let requires_grad = op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Some(op),
        });
        Ok(Var(id))
    }

    /// Reverse sweep from a scalar root. After it returns, `grad` holds
    /// the accumulated gradient for every node that received one.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::NonScalarOutput { shape: root_shape });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(op) = self.nodes[i].op.as_ref() else {
                continue;
            };
            let out_grad = grads[i].as_ref().expect("checked above");
            let vals = Values { nodes: &self.nodes };
            let input_grads = op.grads(&vals, &self.nodes[i].value, out_grad);
            let inputs = op.inputs();
            debug_assert_eq!(inputs.len(), input_grads.len());
            for (var, ig) in inputs.into_iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.len(), self.nodes[var.0].value.numel());
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&ig) {
                            *a += g;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        Ok(())
    }
}
