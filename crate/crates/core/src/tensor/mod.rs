//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Every op that touches a tensor with `requires_grad` records a
//! [`GraphNode`] pointing at its inputs, so the graph is built while the
//! forward pass runs (define-by-run). [`Tensor::backward`] walks the
//! recorded graph once in reverse topological order and accumulates
//! gradients into every reachable tensor that requires them.
//!
//! Tensors are generic over [`Element`], implemented for `f32` (training)
//! and `f64` (gradient checks).

mod kernels;
mod ops;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::iter::Sum;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::Float;

use crate::error::{Error, Result};

pub use kernels::{col2im, im2col, Gemm};
pub(crate) use ops::Op;
pub use ops::CustomBackward;

/// Scalar type a tensor can hold.
pub trait Element:
    Float + Gemm + Default + fmt::Debug + fmt::Display + Sum + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on this thread until the guard is dropped.
pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// A recorded operation: the op (with whatever context its backward rule
/// needs) and the ordered inputs it consumed.
pub struct GraphNode<T: Element> {
    pub(crate) op: Op<T>,
    pub(crate) inputs: Vec<Tensor<T>>,
}

impl<T: Element> GraphNode<T> {
    pub fn op_name(&self) -> &'static str {
        self.op.name()
    }

    pub fn inputs(&self) -> &[Tensor<T>] {
        &self.inputs
    }
}

struct TensorInner<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    node: Option<GraphNode<T>>,
}

/// Reference-counted handle to an n-dimensional row-major array.
///
/// Cloning the handle is cheap and shares storage.
pub struct Tensor<T: Element>(Rc<TensorInner<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<_> = data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.node.as_ref().map(|n| n.op.name()))
            .field("data", &preview)
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    fn build(
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        node: Option<GraphNode<T>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(TensorInner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            node,
        }))
    }

    /// Creates a constant (non-differentiable) tensor.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    /// Creates a leaf tensor, optionally tracked for gradients.
    pub fn leaf(data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor construction", shape, &[data.len()]));
        }
        Ok(Self::build(data, shape.to_vec(), requires_grad, None))
    }

    /// A leaf that requires gradients.
    pub fn parameter(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, true)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(vec![value], Vec::new(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::build(vec![value; numel], shape.to_vec(), false, None)
    }

    /// Output of a recorded op. The node is kept only when grad mode is on
    /// and some input requires gradients.
    pub(crate) fn from_op(data: Vec<T>, shape: Vec<usize>, op: Op<T>, inputs: &[&Tensor<T>]) -> Self {
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = track.then(|| GraphNode {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
        });
        Self::build(data, shape, track, node)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub fn node(&self) -> Option<&GraphNode<T>> {
        self.0.node.as_ref()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values. Only meant for leaf parameters
    /// (optimizer updates, finite-difference probes); mutating a tensor
    /// that a live graph still depends on invalidates its backward pass.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let data = self.data();
        assert_eq!(data.len(), 1, "item() on tensor of shape {:?}", self.shape());
        data[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Forward value identical to `self`; no gradient ever flows back
    /// through the result.
    pub fn stop_gradient(&self) -> Tensor<T> {
        Self::build(self.to_vec(), self.0.shape.clone(), false, None)
    }

    /// Fresh leaf with a copy of the values and the same `requires_grad`.
    pub fn deep_copy(&self) -> Tensor<T> {
        Self::build(self.to_vec(), self.0.shape.clone(), self.0.requires_grad, None)
    }

    fn accumulate_grad(&self, g: Vec<T>) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
            None => *slot = Some(g),
        }
    }

    /// Tensors reachable from `self` through gradient-tracking edges, in
    /// an order where every tensor appears after all of its inputs.
    pub fn topological_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // (tensor, inputs already expanded)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = t.node() {
                for input in node.inputs.iter().rev() {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Backpropagates from a scalar root. Gradients accumulate additively
    /// across calls until cleared with [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarRoot(self.shape().to_vec()));
        }
        self.backward_with(vec![T::one()])
    }

    /// Backpropagates an explicit upstream gradient of the same shape as
    /// `self`, as if `self` fed into a scalar whose gradient it is.
    pub fn backward_with(&self, upstream: Vec<T>) -> Result<()> {
        if upstream.len() != self.numel() {
            return Err(Error::shape("backward_with", &[upstream.len()], self.shape()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topological_order();
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), upstream);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            if let Some(node) = t.node() {
                let input_grads = node.op.backward(&node.inputs, t, &g);
                debug_assert_eq!(input_grads.len(), node.inputs.len());
                for (input, ig) in node.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !input.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(ig.len(), input.numel(), "{}", node.op.name());
                    match pending.get_mut(&input.id()) {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a = *a + *b),
                        None => {
                            pending.insert(input.id(), ig);
                        }
                    }
                }
            }
            t.accumulate_grad(g);
        }
        Ok(())
    }
}
