//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass in creation order.
//! [`Tape::backward`] walks the records in reverse exactly once and returns
//! the accumulated gradients. The tape is single-use: a second backward pass
//! is an error.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{DiffError, Result};
use crate::tensor::Tensor;

/// Backward rule of one node: receives the upstream gradient and a mask of
/// which inputs need gradients; returns one optional gradient per input.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    recording: bool,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            recording: true,
        }
    }

    /// A tape that evaluates values only. Backward rules are never built;
    /// values still live until the tape is dropped.
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, requires_grad: bool, inputs: Vec<usize>, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            inputs,
            backward,
        });
        Var { tape: self, id }
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, self.recording, Vec::new(), None)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, Vec::new(), None)
    }

    /// Records a node computed by an arbitrary kernel. `backward` is only
    /// invoked when at least one input requires a gradient; on a no-grad
    /// tape it is dropped immediately.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], value: Tensor, backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static) -> Var<'t> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires = self.recording && inputs.iter().any(|v| v.requires_grad());
        if requires {
            self.push(value, true, ids, Some(Box::new(backward)))
        } else {
            self.push(value, false, Vec::new(), None)
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let value = loss.value();
        if !value.is_scalar() {
            return Err(DiffError::NonScalarLoss(value.shape().to_vec()));
        }
        if self.consumed.replace(true) {
            return Err(DiffError::GraphConsumed);
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let input_grads = backward(&g, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((&input, gi), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                if !need {
                    continue;
                }
                let Some(gi) = gi else { continue };
                debug_assert_eq!(gi.shape(), nodes[input].value.shape());
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of a backward pass: gradients of reachable leaves, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros when `var` did not influence the loss.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// A copy of the value detached from the graph.
    pub fn to_tensor(&self) -> Tensor {
        (*self.value()).clone()
    }
}
