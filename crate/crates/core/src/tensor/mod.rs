//! Reverse-mode automatic differentiation over dense n-dimensional arrays.
//!
//! A [`Tensor`] is a shape plus a dense row-major value buffer. Tensors
//! produced by differentiable operations carry a graph node recording the
//! producing operation and its inputs; [`Tensor::backward`] walks that graph
//! in reverse topological order, visiting each node exactly once, and
//! accumulates `d(loss)/d(leaf)` on every leaf that requires a gradient.
//!
//! Gradients accumulate across repeated `backward` calls until they are
//! cleared with [`Tensor::zero_grad`].
//!
//! Graphs and their tensors are confined to one thread during construction
//! and backward. Leaf tensors with no graph linkage are plain data.

mod elementwise;
mod gradcheck;
mod reduce;
mod shape_ops;

pub use gradcheck::gradcheck;

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// One recorded differentiable operation in the graph.
///
/// `backward` receives `d(loss)/d(output)` and must accumulate the
/// corresponding contributions into each input's gradient buffer via
/// [`Tensor::accumulate_grad`].
pub(crate) trait GraphOp<T: Scalar> {
    fn inputs(&self) -> Vec<Tensor<T>>;
    fn backward(&self, upstream: &[T]);
}

struct TensorInner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    values: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    op: Option<Box<dyn GraphOp<T>>>,
}

#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    inner: Rc<TensorInner<T>>,
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("leaf", &self.is_leaf())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn new_inner(
        shape: Vec<usize>,
        values: Vec<T>,
        requires_grad: bool,
        op: Option<Box<dyn GraphOp<T>>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    /// Constant leaf: no gradient is ever computed for it.
    pub fn from_vec(shape: &[usize], values: Vec<T>) -> Result<Self> {
        check_shape(shape, values.len())?;
        Ok(Self::new_inner(shape.to_vec(), values, false, None))
    }

    /// Trainable leaf: backward populates its gradient.
    pub fn param(shape: &[usize], values: Vec<T>) -> Result<Self> {
        check_shape(shape, values.len())?;
        Ok(Self::new_inner(shape.to_vec(), values, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new_inner(shape.to_vec(), vec![T::zero(); numel_of(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::new_inner(shape.to_vec(), vec![value; numel_of(shape)], false, None)
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: T) -> Self {
        Self::new_inner(Vec::new(), vec![value], false, None)
    }

    pub(crate) fn from_op(shape: Vec<usize>, values: Vec<T>, op: Box<dyn GraphOp<T>>) -> Self {
        Self::new_inner(shape, values, false, Some(op))
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Whether this tensor participates in gradient flow, either as a
    /// trainable leaf or as the output of an op over tracked inputs.
    pub fn tracked(&self) -> bool {
        self.inner.requires_grad || self.inner.op.is_some()
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn values(&self) -> Ref<'_, [T]> {
        Ref::map(self.inner.values.borrow(), |v| v.as_slice())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.values.borrow().clone()
    }

    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "item() on tensor with {} elements",
                self.numel()
            )));
        }
        Ok(self.inner.values.borrow()[0])
    }

    /// In-place value update for leaves (optimizer steps, running stats).
    pub fn set_values(&self, values: &[T]) {
        assert!(self.is_leaf(), "set_values is only valid on leaf tensors");
        let mut v = self.inner.values.borrow_mut();
        assert_eq!(v.len(), values.len());
        v.copy_from_slice(values);
    }

    /// Apply `f` to the leaf's value buffer in place.
    pub fn update_values(&self, f: impl FnOnce(&mut [T])) {
        assert!(self.is_leaf(), "update_values is only valid on leaf tensors");
        f(&mut self.inner.values.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    /// Borrowing gradient access for hot paths (optimizer).
    pub fn with_grad<R>(&self, f: impl FnOnce(Option<&[T]>) -> R) -> R {
        let g = self.inner.grad.borrow();
        f(g.as_deref())
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[T]) {
        debug_assert_eq!(contribution.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, &ci) in g.iter_mut().zip(contribution) {
                    *gi = *gi + ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Visits each reachable graph node exactly once in reverse topological
    /// order. Leaves that do not require gradients stop propagation.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss {
                elements: self.numel(),
            });
        }
        let order = self.topo_order();
        self.accumulate_grad(&[T::one()]);
        for node in order.iter().rev() {
            if let Some(op) = node.inner.op.as_ref() {
                let upstream = node.inner.grad.borrow().clone();
                if let Some(upstream) = upstream {
                    op.backward(&upstream);
                }
            }
        }
        // Intermediate gradients are scratch space; only leaves keep theirs.
        for node in &order {
            if !node.is_leaf() {
                node.zero_grad();
            } else if !node.requires_grad() {
                node.zero_grad();
            }
        }
        Ok(())
    }

    /// Post-order DFS over the graph; deterministic for a fixed graph.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // (node, inputs_pushed)
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            let inputs = node
                .inner
                .op
                .as_ref()
                .map(|op| op.inputs())
                .unwrap_or_default();
            stack.push((node, true));
            for input in inputs {
                if input.tracked() && !visited.contains(&input.id()) {
                    stack.push((input, false));
                }
            }
        }
        order
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!(
            "zero-sized dimension in shape {shape:?}"
        )));
    }
    if numel_of(shape) != len {
        return Err(Error::InvalidArgument(format!(
            "shape {:?} needs {} values, got {}",
            shape,
            numel_of(shape),
            len
        )));
    }
    Ok(())
}

pub(crate) fn require_same_shape<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    context: &str,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape_mismatch(a.shape(), b.shape(), context));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_construction_and_invariants() {
        let t = Tensor::<f64>::from_vec(&[2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.numel(), 6);
        assert!(t.is_leaf());
        assert!(!t.requires_grad());
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![1.0; 5]).is_err());
        assert!(Tensor::<f64>::from_vec(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn scalar_has_one_element() {
        let s = Tensor::<f64>::scalar(4.5);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item().unwrap(), 4.5);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = x.add(&x).unwrap();
        assert!(matches!(
            y.backward(),
            Err(Error::NonScalarLoss { elements: 3 })
        ));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let x = Tensor::<f64>::param(&[5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let loss = x.sum(None).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 5]);
    }

    #[test]
    fn backward_square_gives_two_x() {
        let x = Tensor::<f64>::param(&[1], vec![3.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum(None).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn diamond_graph_visited_once() {
        // z = x + x used twice more: loss = sum(z*z) = sum(4x^2), dx = 8x.
        // Double-visiting any node would inflate the gradient.
        let x = Tensor::<f64>::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let z = x.add(&x).unwrap();
        let loss = z.mul(&z).unwrap().sum(None).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0, -16.0, 4.0]);
    }

    #[test]
    fn grads_accumulate_until_reset() {
        let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        let loss = || x.sum(None).unwrap();
        loss().backward().unwrap();
        loss().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn unused_leaf_gets_no_gradient() {
        let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        let unused = Tensor::<f64>::param(&[2], vec![5.0, 6.0]).unwrap();
        let loss = x.sum(None).unwrap();
        loss.backward().unwrap();
        assert!(unused.grad().is_none());
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn constant_leaf_stops_propagation() {
        let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        let c = Tensor::<f64>::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        let loss = x.mul(&c).unwrap().sum(None).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 4.0]);
        assert!(c.grad().is_none());
    }

    #[test]
    fn forward_is_deterministic() {
        let x = Tensor::<f64>::from_vec(&[4], vec![0.3, -0.7, 1.9, 2.2]).unwrap();
        let a = x.sigmoid().unwrap().to_vec();
        let b = x.sigmoid().unwrap().to_vec();
        assert_eq!(a, b);
    }
}
