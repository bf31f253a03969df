use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use super::{invalid, Result, Tensor, TensorError};

type BackwardFn = Box<dyn Fn(&[f32], &mut GradSink)>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Eager computation tape. Ops execute on creation; [`Tape::backward`] walks
/// the recorded nodes once in reverse creation order.
///
/// A tape is single-owner and deliberately `!Send`.
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

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
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

    /// Records a constant: no gradient is tracked for it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Records a leaf whose gradient will be reported by [`Tape::backward`].
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records the result of an op. `backward` receives the upstream gradient
    /// of the new node and pushes contributions to the `parents`; it is only
    /// stored when some parent tracks gradients.
    pub(crate) fn push<'t>(
        &'t self,
        op: &'static str,
        value: Tensor,
        parents: &[Var<'t>],
        backward: impl Fn(&[f32], &mut GradSink) + 'static,
    ) -> Result<Var<'t>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| {
            debug_assert!(std::ptr::eq(p.tape, self), "var from another tape");
            nodes[p.id].requires_grad
        });
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Single reverse sweep from the scalar `output`, seeded with 1.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let seed = &nodes[output.id].value;
        if seed.len() != 1 {
            return Err(invalid(
                "backward",
                format!("output must be a scalar, got shape {:?}", seed.shape()),
            ));
        }
        let mut sink = GradSink {
            grads: (0..nodes.len()).map(|_| None).collect(),
            needs: nodes.iter().map(|n| n.requires_grad).collect(),
        };
        if !nodes[output.id].requires_grad {
            return Ok(Gradients { grads: sink.grads });
        }
        sink.grads[output.id] = Some(vec![1.0]);
        for id in (0..=output.id).rev() {
            let Some(backward) = &nodes[id].backward else {
                continue;
            };
            // Interior gradients are released once consumed; only leaves keep theirs.
            let Some(grad) = sink.grads[id].take() else {
                continue;
            };
            backward(&grad, &mut sink);
        }
        for (grad, node) in sink.grads.iter().zip(nodes.iter()) {
            if let Some(g) = grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
                debug_assert_eq!(g.len(), node.value.len());
            }
        }
        Ok(Gradients { grads: sink.grads })
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Shared handle to the forward value.
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    /// Borrow of the forward value without bumping the refcount.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes: Ref<'_, Vec<Node>> = self.tape.nodes.borrow();
        f(&nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f32 {
        self.with_value(|t| t.data()[0])
    }
}

/// Gradient accumulator handed to backward closures.
pub struct GradSink {
    grads: Vec<Option<Vec<f32>>>,
    needs: Vec<bool>,
}

impl GradSink {
    /// Whether the node `id` tracks gradients; closures skip work otherwise.
    pub fn needs(&self, id: usize) -> bool {
        self.needs[id]
    }

    pub fn add(&mut self, id: usize, grad: &[f32]) {
        if !self.needs[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => {
                debug_assert_eq!(acc.len(), grad.len());
                acc.iter_mut().zip(grad).for_each(|(a, g)| *a += g);
            }
            slot @ None => *slot = Some(grad.to_vec()),
        }
    }

    pub fn add_owned(&mut self, id: usize, grad: Vec<f32>) {
        if !self.needs[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => {
                debug_assert_eq!(acc.len(), grad.len());
                acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g);
            }
            slot @ None => *slot = Some(grad),
        }
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of a tracked leaf, shaped like its value. `None` when the
    /// leaf did not influence the output.
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        let grad = self.grads.get(var.id)?.as_ref()?;
        let shape = var.shape();
        Some(Tensor::new(&shape, grad.clone()).expect("gradient matches value shape"))
    }

    /// Like [`Gradients::get`] but zero-filled when absent.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var).unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }

    pub(crate) fn raw(&self, id: usize) -> Option<&[f32]> {
        self.grads.get(id)?.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_do_not_record_backward() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2], 1.0));
        let b = a.mul(a).unwrap();
        assert!(!b.requires_grad());
        let s = b.sum().unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(a).is_none());
    }

    #[test]
    fn leaf_gradient_accumulates_over_uses() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = x.add(x).unwrap().add(x).unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap().get(x).unwrap();
        assert_eq!(g.data(), &[3.0, 3.0]);
    }

    #[test]
    fn backward_can_be_replayed() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = x.mul(x).unwrap().sum().unwrap();
        let first = tape.backward(y).unwrap().get(x).unwrap();
        let second = tape.backward(y).unwrap().get(x).unwrap();
        assert_eq!(first, second);
        assert_eq!(first.data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::zeros(&[3]));
        assert!(tape.backward(x).is_err());
    }
}
