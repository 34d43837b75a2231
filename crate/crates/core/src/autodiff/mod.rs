//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one forward pass in topological
//! order. [`TapeTensor`] is a cheap `Copy` handle into the tape; arithmetic
//! on handles appends nodes. [`Tape::backward`] walks the nodes once in
//! reverse and returns the gradient of a scalar loss with respect to every
//! leaf that requires it.
//!
//! A tape is single-threaded. Independent samples can be differentiated on
//! independent tapes in parallel, sharing a read-only [`ParamStore`].
//! Gradients from repeated backward passes accumulate in a [`GradStore`]
//! until it is explicitly zeroed.

mod nn;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::fmt;

pub use ops::{BinaryOp, UnaryOp};

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamId, ParamStore};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// What a backward rule sees: the upstream gradient, the node's own value
/// and the values of its parents in recording order.
pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub output: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
}

/// Returns one optional gradient per parent, in parent order.
pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(NodeId, ParamId)>>,
    nan_events: Cell<usize>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("nan_events", &self.nan_events.get())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> TapeTensor<'_> {
        self.push_node(value, Vec::new(), None, false)
    }

    /// A free variable whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> TapeTensor<'_> {
        self.push_node(value, Vec::new(), None, true)
    }

    /// Registers a copy of a stored parameter as a differentiable leaf.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> TapeTensor<'_> {
        let t = self.leaf(store.value(id).clone());
        self.params.borrow_mut().push((t.id, id));
        t
    }

    /// Divisions by exact zero observed on this tape.
    pub fn nan_events(&self) -> usize {
        self.nan_events.get()
    }

    pub(crate) fn record_nan_event(&self) {
        self.nan_events.set(self.nan_events.get() + 1);
    }

    pub(crate) fn value(&self, id: NodeId) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    pub(crate) fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Appends an operation node. The backward rule is dropped when no
    /// parent requires a gradient.
    pub(crate) fn push_op(
        &self,
        value: Tensor,
        parents: &[NodeId],
        backward: BackwardFn,
    ) -> TapeTensor<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        let backward = requires_grad.then_some(backward);
        self.push_node(value, parents.to_vec(), backward, requires_grad)
    }

    fn push_node(
        &self,
        value: Tensor,
        parents: Vec<NodeId>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> TapeTensor<'_> {
        let mut nodes = self.nodes.borrow_mut();
        debug_assert!(parents.iter().all(|&p| p < nodes.len()));
        nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        TapeTensor {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiates a scalar `loss` with respect to every leaf.
    ///
    /// Intermediate gradients are released as soon as they have been
    /// propagated; only leaf gradients survive in the result.
    pub fn backward(&self, loss: TapeTensor<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                output: &node.value,
                inputs: node.parents.iter().map(|&p| &nodes[p].value).collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "grad shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }

        Ok(Gradients {
            grads,
            params: self.params.borrow().clone(),
        })
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct TapeTensor<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for TapeTensor<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TapeTensor#{}({:?})", self.id, self.value())
    }
}

impl<'t> TapeTensor<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn node_id(&self) -> NodeId {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub(crate) fn push(&self, value: Tensor, parents: &[NodeId], backward: BackwardFn) -> Self {
        self.tape.push_op(value, parents, backward)
    }
}

/// Leaf gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(NodeId, ParamId)>,
}

impl Gradients {
    /// Gradient with respect to a leaf, `None` if the loss does not depend on it.
    pub fn wrt(&self, t: TapeTensor<'_>) -> Option<&Tensor> {
        self.grads.get(t.id).and_then(Option::as_ref)
    }

    /// Adds the gradients of every registered parameter leaf into `store`.
    pub fn accumulate_into(&self, store: &mut GradStore) {
        for &(node, param) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.add(param, g);
            }
        }
    }
}
