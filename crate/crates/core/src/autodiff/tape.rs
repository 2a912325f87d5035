use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What a node's backward closure receives.
pub struct BackwardArgs<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor,
    /// Forward values of the node's inputs, in call order.
    pub inputs: &'a [&'a Tensor],
    /// Forward value of the node itself.
    pub output: &'a Tensor,
    /// Which inputs need a gradient; closures may skip the others.
    pub needs: &'a [bool],
}

type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<(Option<usize>, Rc<Tensor>)>,
    backward: Option<BackwardFn>,
}

/// Records a computation for one backward pass. Single-writer.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
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
            recording: true,
        }
    }

    /// A tape that records nothing: every `Var` is a constant and
    /// intermediates are freed as soon as they are dropped.
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
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

    /// A differentiable leaf (a parameter or an input under test).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let value = Rc::new(value);
        if !self.recording {
            return Var {
                tape: self,
                id: None,
                value,
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: value.clone(),
            inputs: Vec::new(),
            backward: None,
        });
        Var {
            tape: self,
            id: Some(nodes.len() - 1),
            value,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var {
            tape: self,
            id: None,
            value: Rc::new(value),
        }
    }

    /// Records `value = f(inputs)` with the given backward closure. Nothing is
    /// recorded when no input carries a gradient.
    pub fn apply<'t, F>(&'t self, value: Tensor, inputs: &[&Var<'t>], backward: F) -> Var<'t>
    where
        F: Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>> + 'static,
    {
        let value = Rc::new(value);
        if !self.recording || inputs.iter().all(|v| v.id.is_none()) {
            return Var {
                tape: self,
                id: None,
                value,
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: value.clone(),
            inputs: inputs.iter().map(|v| (v.id, v.value.clone())).collect(),
            backward: Some(Box::new(backward)),
        });
        Var {
            tape: self,
            id: Some(nodes.len() - 1),
            value,
        }
    }

    /// Gradients of a scalar `loss` with respect to every leaf on the tape.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if loss.value.numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = loss.id else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(Tensor::ones(loss.value.shape()));
        for id in (0..=root).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|(_, v)| v.as_ref()).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|(p, _)| p.is_some()).collect();
            let input_grads = backward(&BackwardArgs {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            });
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((parent, value), g) in node.inputs.iter().zip(input_grads) {
                let (Some(pid), Some(g)) = (parent, g) else {
                    continue;
                };
                debug_assert_eq!(g.shape(), value.shape());
                match grads[*pid].as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => grads[*pid] = Some(g),
                }
            }
        }
        // keep only leaf gradients
        for (id, node) in nodes.iter().enumerate() {
            if node.backward.is_some() {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: &Var<'_>) -> Tensor {
        var.id
            .and_then(|id| self.grads.get(id).cloned().flatten())
            .unwrap_or_else(|| Tensor::zeros(var.value.shape()))
    }
}

/// A tensor value tracked by a [`Tape`].
#[derive(Clone)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: Option<usize>,
    pub(crate) value: Rc<Tensor>,
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn into_value(self) -> Tensor {
        Rc::try_unwrap(self.value).unwrap_or_else(|rc| (*rc).clone())
    }
}
