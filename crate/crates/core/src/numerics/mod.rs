//! Dense real tensors with reverse-mode differentiation.
//!
//! The op catalog is exactly what the encoder and pretraining losses need:
//! matmul, transpose, elementwise arithmetic, row softmax, layer norm, GELU,
//! column concatenation, reductions, L2 norm, squared error, log-sum-exp and
//! row gather/scatter. Every op defines its value and exact adjoint; loops use
//! fixed nesting so results are bitwise reproducible.
//!
//! Tensors are immutable after construction; gradients accumulate in interior
//! cells during [`backward`]. One tape per training step, never shared.

mod gradcheck;
mod ops;

pub use gradcheck::{grad_check, GradCheckParam, GradCheckReport};
pub use ops::*;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};

use crate::mat::Mat;
use thiserror::Error;

/// Scalar element type: `f32` for training throughput, `f64` for gradient checks.
pub trait Real:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn erf(self) -> Self;
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Real for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
}

static CHECKED: AtomicBool = AtomicBool::new(true);

/// Toggle finite-output checking after every forward op.
pub fn set_checked_mode(on: bool) {
    CHECKED.store(on, Ordering::Relaxed);
}

pub fn checked_mode() -> bool {
    CHECKED.load(Ordering::Relaxed)
}

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch { op: &'static str, lhs: String, rhs: String },
    #[error("non-finite output of {op} in checked mode")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got {shape}")]
    NonScalarLoss { shape: String },
    #[error("tape already consumed; rebuild the graph before calling backward again")]
    TapeConsumed,
    #[error("{op}: row index {index} out of range for {rows} rows")]
    RowIndex { op: &'static str, index: usize, rows: usize },
    #[error("{op}: duplicate row index {index}")]
    DuplicateIndex { op: &'static str, index: usize },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("gradient check: function is not deterministic (two evaluations differ)")]
    NonDeterministic,
}

pub type Result<T> = std::result::Result<T, NumericsError>;

fn shape_str(rows: usize, cols: usize) -> String {
    format!("{rows}x{cols}")
}

/// Adjoint callback: reads the node's output values and accumulated gradient,
/// adds contributions into the parents' gradient buffers.
pub(crate) type BackwardFn<E> = Box<dyn Fn(&[E], &[E], &[Tensor<E>])>;

pub(crate) struct Node<E: Real> {
    id: u64,
    rows: usize,
    cols: usize,
    values: Vec<E>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<E>>>,
    parents: Vec<Tensor<E>>,
    backward: Option<BackwardFn<E>>,
    tape_spent: Cell<bool>,
}

fn next_node_id() -> u64 {
    use std::sync::atomic::AtomicU64;
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    COUNTER.fetch_add(1, Ordering::Relaxed)
}

/// A matrix-shaped value in the computation graph. Cloning is cheap (shared node).
pub struct Tensor<E: Real> {
    node: Rc<Node<E>>,
}

impl<E: Real> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor { node: Rc::clone(&self.node) }
    }
}

impl<E: Real> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &(self.rows(), self.cols()))
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl<E: Real> Tensor<E> {
    /// Leaf tensor. `requires_grad` marks it as a differentiable parameter.
    pub fn leaf(rows: usize, cols: usize, values: Vec<E>, requires_grad: bool) -> Self {
        assert_eq!(values.len(), rows * cols, "leaf: value length mismatch");
        Tensor {
            node: Rc::new(Node {
                id: next_node_id(),
                rows,
                cols,
                values,
                requires_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
                tape_spent: Cell::new(false),
            }),
        }
    }

    pub fn constant(rows: usize, cols: usize, values: Vec<E>) -> Self {
        Self::leaf(rows, cols, values, false)
    }

    pub fn scalar(v: E) -> Self {
        Self::constant(1, 1, vec![v])
    }

    /// Constant tensor from a plain `f64` matrix (model input boundary).
    pub fn from_mat(m: &Mat) -> Self {
        let values = m.iter().map(|&v| E::from_f64(v)).collect();
        Self::constant(m.rows(), m.cols(), values)
    }

    pub(crate) fn from_op(
        rows: usize,
        cols: usize,
        values: Vec<E>,
        parents: Vec<Tensor<E>>,
        backward: BackwardFn<E>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Tensor {
            node: Rc::new(Node {
                id: next_node_id(),
                rows,
                cols,
                values,
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward: if requires_grad { Some(backward) } else { None },
                tape_spent: Cell::new(false),
            }),
        }
    }

    pub fn rows(&self) -> usize {
        self.node.rows
    }

    pub fn cols(&self) -> usize {
        self.node.cols
    }

    pub fn len(&self) -> usize {
        self.node.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node.values.is_empty()
    }

    pub fn shape_str(&self) -> String {
        shape_str(self.rows(), self.cols())
    }

    pub fn is_scalar(&self) -> bool {
        self.rows() == 1 && self.cols() == 1
    }

    pub fn values(&self) -> &[E] {
        &self.node.values
    }

    /// Scalar value; panics if the tensor is not 1x1.
    pub fn value(&self) -> E {
        assert!(self.is_scalar(), "value() on non-scalar tensor {}", self.shape_str());
        self.node.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Copy of the accumulated gradient, if backward has reached this tensor.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.node.grad.borrow().clone()
    }

    /// Remove and return the accumulated gradient.
    pub fn take_grad(&self) -> Option<Vec<E>> {
        self.node.grad.borrow_mut().take()
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(self.rows(), self.cols(), self.values().iter().map(|v| v.into_f64()).collect())
    }

    pub(crate) fn accumulate_grad(&self, f: impl FnOnce(&mut [E])) {
        let mut slot = self.node.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![E::zero(); self.len()]);
        f(buf);
    }

    fn id(&self) -> u64 {
        self.node.id
    }
}

/// Ordered record of the differentiable operations reachable from one loss,
/// scheduled so each node is visited exactly once, after all of its consumers.
pub struct Tape<E: Real> {
    order: Vec<Tensor<E>>,
}

impl<E: Real> Tape<E> {
    /// Topologically order the `requires_grad` subgraph rooted at `loss`.
    pub fn build(loss: &Tensor<E>) -> Self {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // Iterative post-order DFS; parents are pushed in declaration order so
        // the schedule is a pure function of graph structure.
        let mut stack: Vec<(Tensor<E>, usize)> = vec![(loss.clone(), 0)];
        visited.insert(loss.id());
        while let Some((node, child_idx)) = stack.pop() {
            let parents = &node.node.parents;
            if child_idx < parents.len() {
                stack.push((node.clone(), child_idx + 1));
                let child = &parents[child_idx];
                if child.requires_grad() && !visited.contains(&child.id()) {
                    visited.insert(child.id());
                    stack.push((child.clone(), 0));
                }
            } else {
                order.push(node);
            }
        }
        // Post-order lists every node after its parents; reverse so consumers
        // come first and gradients are complete before a node is expanded.
        order.reverse();
        Tape { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    fn run(&self) {
        for t in &self.order {
            if let Some(back) = &t.node.backward {
                let grad = t.node.grad.borrow();
                if let Some(g) = grad.as_ref() {
                    back(&t.node.values, g, &t.node.parents);
                }
            }
        }
    }
}

/// Reverse-mode sweep from a scalar loss. Gradients land on every
/// `requires_grad` leaf reachable from `loss`, accumulating additively
/// across fan-out.
pub fn backward<E: Real>(loss: &Tensor<E>) -> Result<()> {
    if !loss.is_scalar() {
        return Err(NumericsError::NonScalarLoss { shape: loss.shape_str() });
    }
    if loss.node.tape_spent.get() {
        return Err(NumericsError::TapeConsumed);
    }
    loss.node.tape_spent.set(true);
    if !loss.requires_grad() {
        return Ok(());
    }
    loss.accumulate_grad(|g| g[0] += E::one());
    Tape::build(loss).run();
    Ok(())
}

pub(crate) fn check_finite<E: Real>(op: &'static str, values: &[E]) -> Result<()> {
    if checked_mode() && !values.iter().all(|v| v.is_finite()) {
        return Err(NumericsError::NonFinite { op });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let x = Tensor::<f64>::leaf(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0], true);
        let loss = sum_all(&x).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn square_of_scalar_has_gradient_two_x() {
        let x = Tensor::<f64>::leaf(1, 1, vec![3.0], true);
        let y = mul(&x, &x).unwrap();
        backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // y = x + x  =>  dy/dx = 2 through two paths
        let x = Tensor::<f64>::leaf(1, 2, vec![1.0, 2.0], true);
        let y = add(&x, &x).unwrap();
        let loss = sum_all(&y).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let x = Tensor::<f64>::leaf(1, 2, vec![1.0, 2.0], true);
        let y = add(&x, &x).unwrap();
        match backward(&y) {
            Err(NumericsError::NonScalarLoss { shape }) => assert_eq!(shape, "1x2"),
            other => panic!("expected NonScalarLoss, got {other:?}"),
        }
    }

    #[test]
    fn backward_rejects_reused_tape() {
        let x = Tensor::<f64>::leaf(1, 1, vec![2.0], true);
        let y = mul(&x, &x).unwrap();
        backward(&y).unwrap();
        assert!(matches!(backward(&y), Err(NumericsError::TapeConsumed)));
    }

    #[test]
    fn constant_only_graph_backward_is_noop() {
        let x = Tensor::<f64>::constant(1, 1, vec![2.0]);
        let y = mul(&x, &x).unwrap();
        backward(&y).unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn checked_mode_flags_non_finite() {
        let x = Tensor::<f64>::constant(1, 2, vec![1e308, 1e308]);
        let y = add(&x, &x);
        assert!(matches!(y, Err(NumericsError::NonFinite { .. })));
    }
}
