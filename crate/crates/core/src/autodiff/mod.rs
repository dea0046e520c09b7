//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation applied to a [`Var`] appends a node to its [`Tape`]
//! holding the forward value, links to its operands and a backward
//! closure. [`Tape::backward`] walks the tape in reverse insertion order,
//! which is a valid topological order because operands always precede
//! their results.
//!
//! ```
//! use marnet_core::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new(&[3], vec![-1.0, 0.5, 2.0]).unwrap());
//! let y = x.relu().unwrap().sum().unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0]);
//! ```

mod ops;

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Maps the output gradient to one optional gradient per operand; the
/// flags say which operands need one.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Records operations for one forward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T> core::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input (parameter or probed input).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            op: "leaf",
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        })
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            op: "constant",
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    /// Appends the result of an operation. Non-finite results are rejected.
    pub fn record<'t>(
        &'t self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var<'t, T>],
        backward: BackwardFn<T>,
    ) -> Result<Var<'t, T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let (ids, requires_grad) = {
            let nodes = self.nodes.borrow();
            let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
            let rg = ids.iter().any(|&i| nodes[i].requires_grad);
            (ids, rg)
        };
        Ok(self.push(Node {
            op,
            value,
            parents: ids,
            backward: requires_grad.then_some(backward),
            requires_grad,
        }))
    }

    pub fn value(&self, v: Var<'_, T>) -> Tensor<T> {
        self.nodes.borrow()[v.id].value.clone()
    }

    /// Reverse sweep seeded with ones at `output` (normally a scalar loss).
    pub fn backward(&self, output: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::ones(nodes[output.id].value.shape()));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs)?;
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, need) else {
                    continue;
                };
                if pg.shape() != nodes[p].value.shape() {
                    return Err(Error::shape(node.op, pg.shape(), nodes[p].value.shape()));
                }
                if !pg.is_finite() {
                    return Err(Error::NonFinite { op: node.op });
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of one reverse sweep, retained for leaves only.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like its value when nothing flowed back.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}
