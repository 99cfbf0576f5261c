use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Vector-Jacobian product of one recorded operation.
///
/// Receives the gradient of the loss with respect to the op output and
/// returns one entry per op input, in input order. `None` means the input
/// receives no gradient contribution.
pub type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    leaf: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so reverse index order is a valid
/// topological order for the backward sweep. A tape is owned by a single
/// forward/backward pass and is not shared across threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
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

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a trainable leaf; its gradient is reported by [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            requires_grad: true,
            leaf: true,
            inputs: Vec::new(),
            backward: None,
        })
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            requires_grad: false,
            leaf: true,
            inputs: Vec::new(),
            backward: None,
        })
    }

    /// Records the result of an operation over `inputs`.
    ///
    /// The output is checked for NaN/Inf first, and `op` names the
    /// operation in the resulting error. The backward closure is dropped
    /// when no input requires a gradient.
    pub fn record<'t, F>(&'t self, op: &'static str, inputs: &[Var<'t>], value: Tensor, backward: F) -> Result<Var<'t>>
    where
        F: Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        let value = value.ensure_finite(op)?;
        let ids: Vec<usize> = inputs
            .iter()
            .map(|v| {
                debug_assert!(std::ptr::eq(v.tape, self), "mixing vars from different tapes");
                v.id
            })
            .collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push(Node {
            value: Rc::new(value),
            requires_grad,
            leaf: false,
            inputs: ids,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        }))
    }

    /// Reverse sweep from a 0-dimensional loss.
    ///
    /// Contributions are accumulated in a fixed order (descending node id,
    /// then input order), so repeated runs are bit-identical.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.rank() != 0 {
            return contract(
                "backward",
                format!("loss must be 0-dimensional, got shape {:?}", root.value.shape()),
            );
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.id] = Some(Tensor::scalar(1.0));
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if node.leaf || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let Some(backward) = node.backward.as_ref() else { continue };
            let input_grads = backward(&g);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.shape(), nodes[input].value.shape());
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        for (id, node) in nodes.iter().enumerate() {
            if !(node.leaf && node.requires_grad) {
                grads[id] = None;
            } else if grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of a scalar loss with respect to every trainable leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf created with [`Tape::leaf`]; `None` for other vars.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Records a constant on the same tape.
    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}
