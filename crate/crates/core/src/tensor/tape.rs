use std::cell::{Cell, RefCell};
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Vector-Jacobian product of one recorded operation.
pub(crate) trait Backward<T: Scalar> {
    /// Returns one gradient per input, skipping inputs where `needs[i]` is false.
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>;
}

pub(crate) struct BackwardCtx<'a, T: Scalar> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    pub needs: Vec<bool>,
}

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    inputs: Vec<usize>,
    rule: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
    op: &'static str,
}

/// Records operations in execution order for reverse-mode differentiation.
///
/// Node indices are assigned on push, so every node's inputs precede it.
/// Leaf gradients accumulate across [`Tape::backward`] calls until
/// [`Tape::zero_grad`].
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    leaf_grads: RefCell<Vec<Option<Tensor<T>>>>,
    check_finite: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
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
        Tape {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(Vec::new()),
            check_finite: Cell::new(false),
        }
    }

    /// When enabled, every op output is scanned and a non-finite value fails
    /// the op with [`Error::NonFinite`].
    pub fn set_check_finite(&self, on: bool) {
        self.check_finite.set(on);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf.
    pub fn param(&self, value: impl Into<Arc<Tensor<T>>>) -> Var<'_, T> {
        self.leaf(value.into(), true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: impl Into<Arc<Tensor<T>>>) -> Var<'_, T> {
        self.leaf(value.into(), false)
    }

    fn leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            inputs: Vec::new(),
            rule: None,
            requires_grad,
            op: "leaf",
        });
        self.leaf_grads.borrow_mut().push(None);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(
        &self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[Var<'_, T>],
        rule: impl Backward<T> + 'static,
    ) -> Result<Var<'_, T>> {
        if self.check_finite.get() && !value.all_finite() {
            return Err(Error::NonFinite(op));
        }
        let mut nodes = self.nodes.borrow_mut();
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = ids.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            inputs: ids,
            rule: if requires_grad {
                Some(Box::new(rule))
            } else {
                None
            },
            requires_grad,
            op,
        });
        self.leaf_grads.borrow_mut().push(None);
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.leaf_grads.borrow()[v.id].clone()
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().iter_mut().for_each(|g| *g = None);
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Usage(
                "loss does not depend on any trainable leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));
        let mut leaf_grads = self.leaf_grads.borrow_mut();

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let Some(rule) = &node.rule else {
                if node.requires_grad {
                    match &mut leaf_grads[id] {
                        Some(acc) => acc.add_assign(&grad),
                        slot @ None => *slot = Some(grad),
                    }
                }
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|&i| &*nodes[i].value).collect(),
                output: &node.value,
                grad: &grad,
                needs: node.inputs.iter().map(|&i| nodes[i].requires_grad).collect(),
            };
            let input_grads = rule.backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op);
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    nodes[input].value.shape(),
                    "gradient shape from `{}`",
                    node.op
                );
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    /// Records `value` as a constant on the same tape.
    pub fn constant(&self, value: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(value)
    }
}
