//! Minimal deterministic tensor engine with reverse-mode automatic
//! differentiation.
//!
//! Tensors are immutable row-major buffers plus an optional backward
//! closure linking them to their parents. Calling [`Tensor::backward`] on a
//! scalar walks the graph in reverse topological order and accumulates
//! gradients into the leaf tensors that were created with
//! `requires_grad = true`.
//!
//! Two element widths are supported: `f64` for tests and finite-difference
//! oracles, `f32` for training. Forward passes are bit-deterministic given
//! identical inputs and parameters: every reduction runs in a fixed order
//! and nothing is parallelized.

pub(crate) mod conv;
mod norm;
pub(crate) mod ops;

pub use conv::{conv2d, depthwise_conv2d, max_pool2d, pointwise_conv2d};
pub use norm::{batch_norm_eval, batch_norm_train, group_norm};
pub use ops::{
    add, axis_mean, channel_shuffle, concat, dot_const, global_avg_pool, hard_swish, linear,
    log_softmax, matmul, mul, pad2d, permute, relu, reshape, scale, sigmoid, slice_axis, softmax,
    sub, sum_all, tanh,
};

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use num_traits::Float;
use rand::distr::uniform::SampleUniform;

use crate::error::{Result, SerError};

/// Element width marker stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Scalar element of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    Float
    + SampleUniform
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64v(self) -> f64;
    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64v(self) -> f64 {
        self as f64
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64v(self) -> f64 {
        self
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Per-parent gradient contributions returned by a backward closure, in the
/// same order as the node's parent list. `None` marks a parent that does not
/// require a gradient.
pub(crate) type VjpFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Inner<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    parents: Vec<Tensor<T>>,
    vjp: Option<VjpFn<T>>,
}

/// N-dimensional row-major array with an optional gradient buffer.
///
/// Cloning a tensor is cheap: it copies an `Arc` handle, not the data.
pub struct Tensor<T: Element> {
    inner: Arc<Inner<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.inner.id, self.inner.shape, self.inner.requires_grad
        )
    }
}

impl<T: Element> Tensor<T> {
    /// Leaf tensor without gradient tracking.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    /// Leaf tensor, optionally tracked for gradients.
    pub fn leaf(data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(SerError::Dim {
                op: "leaf",
                detail: format!(
                    "shape {:?} implies {} elements, data has {}",
                    shape,
                    numel,
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: shape.to_vec(),
                data,
                requires_grad,
                grad: Mutex::new(None),
                parents: Vec::new(),
                vjp: None,
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::leaf(vec![T::zero(); numel], shape, false).expect("consistent shape")
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Self::leaf(vec![v; numel], shape, false).expect("consistent shape")
    }

    pub fn scalar(v: T) -> Self {
        Self::leaf(vec![v], &[], false).expect("scalar")
    }

    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        vjp: VjpFn<T>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                parents,
                vjp: if requires_grad { Some(vjp) } else { None },
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data[0]
    }

    /// Copy of the accumulated gradient, if any backward pass reached this
    /// leaf. Leaves never touched by a backward pass report `None`.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    /// Gradient buffer, treating "never reached" as all-zeros.
    pub fn grad_or_zeros(&self) -> Vec<T> {
        self.grad().unwrap_or_else(|| vec![T::zero(); self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock") = None;
    }

    /// Leaf copy of this tensor's values, detached from the graph.
    pub fn detach(&self) -> Tensor<T> {
        Self::from_vec(self.inner.data.clone(), &self.inner.shape).expect("consistent")
    }

    fn accumulate_grad(&self, contribution: &[T]) {
        let mut slot = self.inner.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi = *gi + *ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Reverse-mode pass from a scalar loss. Accumulates `d loss / d leaf`
    /// into every reachable leaf with `requires_grad`; calling twice without
    /// zeroing accumulates.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(SerError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(SerError::Contract(
                "backward on a tensor unreachable from any tracked leaf".into(),
            ));
        }

        // Iterative post-order DFS. Children end up after their parents, so
        // the reversed list processes every consumer before its producer.
        let order = self.topo_order();
        let mut grads: std::collections::HashMap<u64, Vec<T>> = std::collections::HashMap::new();
        grads.insert(self.id(), vec![T::one()]);

        for node in order.iter().rev() {
            let Some(gout) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.inner.vjp {
                Some(vjp) => {
                    let contribs = vjp(&gout);
                    debug_assert_eq!(contribs.len(), node.inner.parents.len());
                    for (parent, contrib) in node.inner.parents.iter().zip(contribs) {
                        if !parent.requires_grad() {
                            continue;
                        }
                        let Some(c) = contrib else { continue };
                        debug_assert_eq!(c.len(), parent.numel());
                        match grads.get_mut(&parent.id()) {
                            Some(acc) => {
                                for (a, v) in acc.iter_mut().zip(&c) {
                                    *a = *a + *v;
                                }
                            }
                            None => {
                                grads.insert(parent.id(), c);
                            }
                        }
                    }
                }
                None => node.accumulate_grad(&gout),
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
        // Stack holds (node, parents_pushed).
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.inner.parents {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    /// Row-major strides of this tensor's shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.inner.shape)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_shape_mismatch_is_rejected() {
        let err = Tensor::<f64>::leaf(vec![1.0, 2.0], &[3], false).unwrap_err();
        assert!(matches!(err, SerError::Dim { op: "leaf", .. }));
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::<f64>::leaf(vec![1.0, 2.0], &[2], true).unwrap();
        let y = ops::relu(&x);
        assert!(matches!(
            y.backward().unwrap_err(),
            SerError::Contract(_)
        ));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let x = Tensor::<f64>::leaf(vec![1.0, -2.0, 3.0], &[3], true).unwrap();
        let loss = ops::sum_all(&x);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_half_sum_of_squares_is_x() {
        let x = Tensor::<f64>::leaf(vec![1.5, -0.25, 4.0], &[3], true).unwrap();
        let loss = ops::scale(&ops::sum_all(&ops::mul(&x, &x).unwrap()), 0.5);
        loss.backward().unwrap();
        let g = x.grad().unwrap();
        for (gi, xi) in g.iter().zip(x.data()) {
            assert!((gi - xi).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_twice_accumulates() {
        let x = Tensor::<f64>::leaf(vec![2.0], &[1], true).unwrap();
        let loss = ops::sum_all(&x);
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn unreachable_leaf_keeps_zero_grad() {
        let x = Tensor::<f64>::leaf(vec![1.0, 2.0], &[2], true).unwrap();
        let unused = Tensor::<f64>::leaf(vec![5.0], &[1], true).unwrap();
        ops::sum_all(&x).backward().unwrap();
        assert!(unused.grad().is_none());
        assert_eq!(unused.grad_or_zeros(), vec![0.0]);
    }
}
