//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to its [`Var`] handles in
//! execution order, so node ids are already a topological order. Calling
//! [`Tape::backward`] on a scalar walks the tape once in reverse and leaves the
//! accumulated gradient of every leaf that was created with `requires_grad`.
//!
//! Tapes are single-threaded (`Rc`/`RefCell` inside); parallel work uses one
//! tape per worker.

mod conv;
mod gradcheck;
pub(crate) mod ops;

pub use gradcheck::{check_gradients, check_gradients_with};
pub use ops::matmul_raw;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Receives the output gradient and a per-parent "needs gradient" mask and
/// returns one optional gradient per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Recording context for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
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

    /// Records a trainable leaf holding a copy of `t`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), true)
    }

    /// Records a constant: no gradient is ever accumulated for it.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn constant_from(&self, shape: &[usize], data: Vec<f64>) -> Var<'_> {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push_leaf(shape.to_vec(), data, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant_from(&[1], vec![v])
    }

    fn push_leaf(&self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value: Rc::new(data),
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records the result of a primitive. `backward` is dropped when no parent
    /// participates in differentiation.
    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<f64>,
        parents: &[Var<'_>],
        backward: BackwardFn,
    ) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            shape,
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Runs reverse-mode differentiation from a scalar `root`.
    ///
    /// Afterwards [`Tape::grad`] returns `d root / d leaf` for every leaf that
    /// was recorded with [`Tape::leaf`]. Intermediate gradients are released as
    /// soon as they have been propagated.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.len(), nodes[p].value.len());
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the last backward root with respect to `v`, if any reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<Vec<f64>> {
        self.grads.borrow().get(v.id).cloned().flatten()
    }

    /// Like [`Tape::grad`], but returns zeros for unreached leaves.
    pub fn grad_or_zeros(&self, v: Var<'_>) -> Vec<f64> {
        self.grad(v).unwrap_or_else(|| vec![0.0; v.numel()])
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    /// Shared handle to the forward value.
    pub fn value(&self) -> Rc<Vec<f64>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&self.shape(), self.value().to_vec()).expect("tape values are shape-consistent")
    }

    /// First element; intended for scalar results.
    pub fn item(&self) -> f64 {
        self.value()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<f64>,
        parents: &[Var<'t>],
        backward: BackwardFn,
    ) -> Var<'t> {
        self.tape.push(shape, value, parents, backward)
    }
}
