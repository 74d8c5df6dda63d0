//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward program. Values are computed
//! eagerly, so a taped forward pass returns exactly what the untaped code returns.
//! [`Tape::backward`] then walks the nodes in reverse and accumulates gradients for
//! the trainable leaves.
//!
//! Routing is differentiated by unrolling its iterations: the routing ops in
//! [`routing`] build each iteration from the same per-window primitives as
//! [`crate::routing`].

mod gradcheck;
mod ops;
pub mod routing;


pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport, ParamCheck, Stencil};
pub(crate) use ops::Op;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    inputs: Vec<usize>,
    needs_grad: bool,
}

/// Recording of one forward program.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    degenerate: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            degenerate: 0,
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Param, Vec::new())
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Constant, Vec::new())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Degenerate normalizations and mean fallbacks hit while recording.
    pub fn degenerate(&self) -> usize {
        self.degenerate
    }

    pub(crate) fn add_degenerate(&mut self, count: usize) {
        self.degenerate += count;
    }

    pub(crate) fn push_node(&mut self, value: Tensor<T>, op: Op<T>, inputs: Vec<usize>) -> Var {
        let needs_grad = matches!(op, Op::Param) || inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn op(&self, k: usize) -> &Op<T> {
        &self.nodes[k].op
    }

    pub(crate) fn input_value(&self, k: usize, slot: usize) -> &Tensor<T> {
        &self.nodes[self.nodes[k].inputs[slot]].value
    }

    pub(crate) fn node_value(&self, k: usize) -> &Tensor<T> {
        &self.nodes[k].value
    }

    pub(crate) fn input_count(&self, k: usize) -> usize {
        self.nodes[k].inputs.len()
    }

    pub(crate) fn input_needs_grad(&self, k: usize, slot: usize) -> bool {
        self.nodes[self.nodes[k].inputs[slot]].needs_grad
    }

    /// Gradients of a scalar `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let value = self.value(loss);
        if value.len() != 1 {
            return shape_err("backward", format!("loss must be scalar, got {:?}", value.dims()));
        }
        self.backward_with(loss, Tensor::from_parts(value.shape().clone(), vec![T::one()]))
    }

    /// Reverse pass seeded with an explicit output cotangent of `output`'s shape.
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.dims() != self.dims(output) {
            return shape_err(
                "backward",
                format!("seed {:?} for output {:?}", seed.dims(), self.dims(output)),
            );
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.into_data());
        for k in (0..=output.0).rev() {
            let node = &self.nodes[k];
            if !node.needs_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[k].take() else { continue };
            let contributions = self.backward_node(k, &g)?;
            for (slot, c) in contributions.into_iter().enumerate() {
                let Some(c) = c else { continue };
                if c.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NanGradient {
                        node: k,
                        op: node.op.name(),
                    });
                }
                let target = node.inputs[slot];
                match &mut grads[target] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        let mut out = vec![None; self.nodes.len()];
        for (k, node) in self.nodes.iter().enumerate().take(output.0 + 1) {
            if matches!(node.op, Op::Param) {
                let data = grads[k]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                out[k] = Some(Tensor::from_parts(node.value.shape().clone(), data));
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Gradients of one backward pass, keyed by the parameter's [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a trainable leaf recorded before the loss; `None` otherwise.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but panics when `v` is not a parameter.
    pub fn wrt(&self, v: Var) -> &Tensor<T> {
        self.get(v).expect("gradient requested for a non-parameter node")
    }
}
