//! Wengert-list reverse-mode autodiff.
//!
//! A [`Tape`] records one forward pass. Nodes are appended in execution
//! order, so the list is already topologically sorted; [`Tape::backward`]
//! walks it once in reverse and then marks the tape consumed.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{Broadcast, MatmulPlan};
use crate::tensor::{Float, Tensor};

use super::params::{ParamId, ParamStore};

#[derive(Debug)]
pub(crate) enum Op<F> {
    Leaf,
    Add(usize, usize, Broadcast, Broadcast),
    Sub(usize, usize, Broadcast, Broadcast),
    Mul(usize, usize, Broadcast, Broadcast),
    Scale(usize, F),
    MatMul(usize, usize, MatmulPlan),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Expand(usize, Broadcast),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu(usize),
    Abs(usize),
    Softplus(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    SumAll(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    PairwiseDistance(usize),
    Gather {
        x: usize,
        index: Vec<usize>,
    },
}

impl<F> Op<F> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Expand(..) => "expand",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Abs(..) => "abs",
            Op::Softplus(..) => "softplus",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::SumAll(..) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::PairwiseDistance(..) => "pairwise_distance",
            Op::Gather { .. } => "gather",
        }
    }
}

pub(crate) struct Node<F> {
    pub(crate) value: Tensor<F>,
    pub(crate) op: Op<F>,
    pub(crate) requires_grad: bool,
    pub(crate) param: Option<ParamId>,
}

/// Deliberate backward-rule corruption, used only as a negative control for
/// gradient checking.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Scales the GELU input gradient by 1.5.
    GeluBackward,
}

/// One recorded forward pass.
pub struct Tape<F: Float> {
    pub(crate) nodes: RefCell<Vec<Node<F>>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    consumed: Cell<bool>,
    non_finite: Cell<Option<(usize, &'static str)>>,
    fault: Cell<Option<Fault>>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Float> {
    pub(crate) tape: &'t Tape<F>,
    pub(crate) id: usize,
}

impl<F: Float> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
            consumed: Cell::new(false),
            non_finite: Cell::new(None),
            fault: Cell::new(None),
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&self, fault: Fault) {
        self.fault.set(Some(fault));
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A constant input; no gradient is tracked.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, false, None)
    }

    /// An input whose gradient is wanted.
    pub fn leaf(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, true, None)
    }

    /// The current value of a registered parameter. Repeated lookups of the
    /// same parameter share one node.
    pub fn param(&self, store: &ParamStore<F>, id: ParamId) -> Var<'_, F> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let var = self.push(store.value(id).clone(), Op::Leaf, true, Some(id));
        self.param_nodes.borrow_mut().insert(id, var.id);
        var
    }

    pub(crate) fn push(
        &self,
        value: Tensor<F>,
        op: Op<F>,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.non_finite.get().is_none() && !value.all_finite() {
            self.non_finite.set(Some((id, op.name())));
        }
        nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        Var { tape: self, id }
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// First node whose value contained NaN or Inf, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite.get() {
            None => Ok(()),
            Some((node, op)) => Err(Error::NonFinite { op, node }),
        }
    }

    /// Back-propagates from a scalar. Every tracked node reachable from
    /// `loss` receives a gradient. The tape cannot be reused afterwards.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        if self.consumed.replace(true) {
            return Err(Error::contract("tape already consumed by a previous backward pass"));
        }
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if !nodes[loss.id].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![F::one()]);
        let fault = self.fault.get();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                super::backward::propagate(&nodes, id, &g, &mut grads, fault);
            }
            grads[id] = Some(g);
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            params,
        })
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node<F>>> {
        self.nodes.borrow()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, usize)>,
}

impl<F: Float> Gradients<F> {
    pub fn wrt(&self, var: Var<'_, F>) -> Option<Tensor<F>> {
        let g = self.grads.get(var.id)?.as_ref()?;
        Some(Tensor::new(&self.shapes[var.id], g.clone()).expect("gradient shape"))
    }

    /// Gradients of parameters reached by the backward pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[F])> {
        self.params
            .iter()
            .filter_map(|&(p, node)| self.grads[node].as_deref().map(|g| (p, g)))
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<F>) {
        for (id, g) in self.params() {
            store.accumulate_grad(id, g);
        }
    }
}

impl<'t, F: Float> Var<'t, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor<F> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn item(&self) -> F {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub(crate) fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let loss = x.mul(x).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        let grads = tape.backward(x.sum()).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[3]));
        let loss = x.sum();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaf_gets_no_gradient() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        let y = tape.leaf(Tensor::ones(&[2]));
        let grads = tape.backward(x.sum()).unwrap();
        assert!(grads.wrt(y).is_none());
    }

    #[test]
    fn non_finite_values_are_flagged() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(&[1], vec![1e30]).unwrap());
        let _ = x.mul(x).unwrap().mul(x).unwrap();
        assert!(matches!(tape.check_finite(), Err(Error::NonFinite { op: "mul", .. })));
    }
}
