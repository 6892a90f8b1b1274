//! Reverse-mode gradient tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] walks the record in reverse and accumulates gradients
//! for every node that (transitively) depends on a leaf created with
//! [`Tape::param`].

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::tensor::Tensor;

/// Backward rule: receives the upstream gradient, the parent values, the
/// node's own value and a mask of which parents need a gradient.
pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub inputs: Vec<Rc<Tensor>>,
    pub output: &'a Tensor,
    pub need: Vec<bool>,
}

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Records a computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    op_count: Cell<usize>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A constant leaf: no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), false, None)
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), true, None)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of non-leaf operations recorded so far.
    pub fn op_count(&self) -> usize {
        self.op_count.get()
    }

    pub(crate) fn push(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if backward.is_some() {
            self.op_count.set(self.op_count.get() + 1);
        }
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Var { tape: self, id }
    }

    /// Record an operation over `inputs`.
    pub(crate) fn op(&self, inputs: &[Var<'_>], value: Tensor, backward: BackwardFn) -> Var<'_> {
        let parents: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        self.push(value, parents, requires_grad, Some(backward))
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var<'_>) -> Grads {
        self.backward_with(loss, Tensor::ones(loss.value().shape()))
    }

    /// Back-propagate an explicit upstream gradient `seed` from `root`.
    pub fn backward_with(&self, root: Var<'_>, seed: Tensor) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(
            seed.shape(),
            nodes[root.id].value.shape(),
            "seed shape must match root value"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(seed);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<Rc<Tensor>> =
                node.parents.iter().map(|&p| Rc::clone(&nodes[p].value)).collect();
            let need: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let ctx = BackwardCtx {
                grad: &grad,
                inputs,
                output: &node.value,
                need,
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "gradient shape mismatch");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Grads { grads }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of a leaf; `None` if the leaf did not influence the loss.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, or zeros shaped like it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Whether two handles refer to the same node.
    pub fn same_node(&self, other: &Var<'_>) -> bool {
        std::ptr::eq(self.tape, other.tape) && self.id == other.id
    }
}
