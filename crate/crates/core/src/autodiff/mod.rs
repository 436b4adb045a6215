//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Operations whose
//! inputs are all constants are evaluated without recording a backward rule, so
//! inference on a tape costs no more than a plain forward pass.

mod conv;
pub(crate) mod ops;

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;

pub use conv::{conv_output_extent, ConvGeometry};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Maps the output gradient to one optional gradient per parent. The mask says
/// which parents need a gradient; the rule may skip the others.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    is_leaf: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Ordered record of executed operations. Confined to one thread.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf; receives a gradient from [`Tape::backward`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value,
            requires_grad: true,
            is_leaf: true,
            parents: Vec::new(),
            backward: None,
        })
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value,
            requires_grad: false,
            is_leaf: true,
            parents: Vec::new(),
            backward: None,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn record<F>(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: F,
    ) -> Result<Var<'_, T>>
    where
        F: Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        Ok(self.push(Node {
            value,
            requires_grad,
            is_leaf: false,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
        }))
    }

    /// Propagates gradients from a scalar `loss` to every trainable leaf.
    ///
    /// The tape is consumed: backward rules are released and a second call
    /// fails.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if self.consumed.get() {
            return Err(Error::Backward("tape already consumed".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        let mut leaf_grads = BTreeMap::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.is_leaf {
                if node.requires_grad {
                    leaf_grads.insert(id, Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                continue;
            }
            let Some(rule) = node.backward.as_ref() else { continue };
            let mask: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = rule(&g, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &needed) in node.parents.iter().zip(parent_grads).zip(&mask) {
                let (Some(pg), true) = (pg, needed) else { continue };
                debug_assert_eq!(pg.len(), nodes[p].value.len());
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a = *a + *b),
                    slot => *slot = Some(pg),
                }
            }
        }
        drop(nodes);

        let mut nodes = self.nodes.borrow_mut();
        for node in nodes.iter_mut() {
            node.backward = None;
        }
        for (id, node) in nodes.iter().enumerate() {
            if node.is_leaf && node.requires_grad {
                leaf_grads
                    .entry(id)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { by_leaf: leaf_grads })
    }
}

/// Gradients of one backward pass, keyed by leaf.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    by_leaf: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_leaf.get(&var.id)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> Option<T> {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    /// Constant copy of this value; gradients do not flow through it.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant(self.value())
    }

    pub(crate) fn same_tape(&self, other: &Var<'_, T>) -> bool {
        std::ptr::eq(self.tape, other.tape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = x.square().unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[5], 2.0));
        let loss = x.mean().unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.2));
    }

    #[test]
    fn unreached_leaf_gets_zero() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0));
        let y = tape.leaf(Tensor::full(&[3], 1.0));
        let loss = x.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(y).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_and_double_backward_fail() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0));
        assert!(tape.backward(x.square().unwrap()).is_err());
        let loss = x.sum().unwrap();
        tape.backward(loss).unwrap();
        let err = tape.backward(loss).unwrap_err();
        assert!(err.to_string().contains("consumed"));
    }

    #[test]
    fn constants_record_no_rule() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::full(&[2], 1.0));
        let b = a.add(a).unwrap();
        assert!(!b.requires_grad());
        assert!(tape.nodes.borrow()[b.id].backward.is_none());
    }

    #[test]
    fn linear_combination_of_losses() {
        // backward(a*f + b*g) == a*grad f + b*grad g exactly for power-of-two weights
        let x0 = Tensor::new(vec![4], vec![0.5f64, -1.0, 2.0, 0.25]).unwrap();
        let grad = |wf: f64, wg: f64| {
            let tape = Tape::<f64>::new();
            let x = tape.leaf(x0.clone());
            let f = x.square().unwrap().sum().unwrap();
            let g = x.abs().unwrap().mean().unwrap();
            let loss = f.scale(wf).unwrap().add(g.scale(wg).unwrap()).unwrap();
            tape.backward(loss).unwrap().get(x).unwrap().clone()
        };
        let combined = grad(2.0, 4.0);
        let f_only = grad(1.0, 0.0);
        let g_only = grad(0.0, 1.0);
        for i in 0..4 {
            let expect = 2.0 * f_only.data()[i] + 4.0 * g_only.data()[i];
            assert_eq!(combined.data()[i], expect);
        }
    }
}
