//! Dense n-dimensional tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable row-major buffer plus an optional link into
//! the autograd graph. Ops whose inputs carry a graph link record a backward
//! closure; calling [`Tensor::backward`] on a scalar walks that graph in
//! reverse topological order and deposits gradients into every reachable
//! leaf created with [`Tensor::requires_grad`].
//!
//! Everything is generic over [`Element`] so the same model code runs in
//! `f32` for training and in `f64` for finite-difference checks.

mod conv;
mod element;
mod linalg;
mod loss;
mod norm;
mod ops;

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

pub use element::Element;

use crate::error::{Error, Result};

type BackwardFn<E> = Box<dyn Fn(&[E], &[bool]) -> Vec<Option<Vec<E>>> + Send + Sync>;

pub(crate) struct Node<E: Element> {
    parents: Vec<Option<Arc<Node<E>>>>,
    backward: Option<BackwardFn<E>>,
    /// Accumulated gradient; only populated on leaves.
    grad: Mutex<Option<Vec<E>>>,
}

#[derive(Clone)]
pub struct Tensor<E: Element = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    node: Option<Arc<Node<E>>>,
}

/// Value equality: shape and data, ignoring gradient tracking.
impl<E: Element> PartialEq for Tensor<E> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("new", format!("zero-sized axis in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::dim(
                "new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, E::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: E) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![value; n]),
            node: None,
        }
    }

    pub fn scalar(value: E) -> Self {
        Self::full(vec![1], value)
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| E::from_f64(v)).collect())
    }

    /// Marks this tensor as a differentiable leaf. Gradients accumulate into
    /// it on [`backward`](Self::backward).
    pub fn requires_grad(mut self) -> Self {
        self.node = Some(Arc::new(Node {
            parents: Vec::new(),
            backward: None,
            grad: Mutex::new(None),
        }));
        self
    }

    /// Copy of this tensor cut from the graph.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn item(&self) -> E {
        self.data[0]
    }

    /// Converts element type. The result is untracked.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .map(|v| F::from_f64(v.as_f64()))
                    .collect(),
            ),
            node: None,
        }
    }

    /// Gradient accumulated on a leaf, if any.
    pub fn grad(&self) -> Option<Tensor<E>> {
        let node = self.node.as_ref()?;
        let g = node.grad.lock().expect("grad lock poisoned");
        g.as_ref().map(|g| Tensor {
            shape: self.shape.clone(),
            data: Arc::new(g.clone()),
            node: None,
        })
    }

    pub(crate) fn take_grad(&self) -> Option<Vec<E>> {
        let node = self.node.as_ref()?;
        let mut g = node.grad.lock().expect("grad lock poisoned");
        g.take()
    }

    pub fn zero_grad(&self) {
        if let Some(node) = &self.node {
            *node.grad.lock().expect("grad lock poisoned") = None;
        }
    }

    /// Mutable access to the buffer, copying it first if shared.
    /// Only the optimizer and initializers should need this.
    pub(crate) fn data_mut(&mut self) -> &mut Vec<E> {
        Arc::make_mut(&mut self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, layer: &str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer: layer.to_string(),
                detail: format!("non-finite value at flat index {pos} of shape {:?}", self.shape),
            });
        }
        Ok(())
    }

    /// Records an op output. When no parent is tracked the backward closure
    /// is dropped and the result is a plain constant.
    pub(crate) fn from_op<F>(shape: Vec<usize>, data: Vec<E>, parents: &[&Tensor<E>], backward: F) -> Self
    where
        F: Fn(&[E], &[bool]) -> Vec<Option<Vec<E>>> + Send + Sync + 'static,
    {
        Self::from_op_shared(shape, Arc::new(data), parents, backward)
    }

    pub(crate) fn from_op_shared<F>(
        shape: Vec<usize>,
        data: Arc<Vec<E>>,
        parents: &[&Tensor<E>],
        backward: F,
    ) -> Self
    where
        F: Fn(&[E], &[bool]) -> Vec<Option<Vec<E>>> + Send + Sync + 'static,
    {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let tracked = parents.iter().any(|p| p.node.is_some());
        let node = tracked.then(|| {
            Arc::new(Node {
                parents: parents.iter().map(|p| p.node.clone()).collect(),
                backward: Some(Box::new(backward) as BackwardFn<E>),
                grad: Mutex::new(None),
            })
        });
        Self { shape, data, node }
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape
            )));
        }
        let Some(root) = &self.node else {
            return Ok(());
        };
        let order = topo_order(root);
        let mut grads: HashMap<*const Node<E>, Vec<E>> = HashMap::new();
        grads.insert(Arc::as_ptr(root), vec![E::one()]);

        for node in order.iter().rev() {
            let key = Arc::as_ptr(node);
            let Some(g) = grads.remove(&key) else {
                continue;
            };
            match &node.backward {
                None => {
                    let mut slot = node.grad.lock().expect("grad lock poisoned");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => *slot = Some(g),
                    }
                }
                Some(f) => {
                    let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
                    let parent_grads = f(&g, &needs);
                    for (parent, pg) in node.parents.iter().zip(parent_grads) {
                        let (Some(parent), Some(pg)) = (parent, pg) else {
                            continue;
                        };
                        grads
                            .entry(Arc::as_ptr(parent))
                            .and_modify(|acc| acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b))
                            .or_insert(pg);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Post-order DFS without recursion; U-Net graphs run a few thousand nodes deep.
fn topo_order<E: Element>(root: &Arc<Node<E>>) -> Vec<Arc<Node<E>>> {
    let mut order = Vec::new();
    let mut visited = std::collections::HashSet::new();
    let mut stack: Vec<(Arc<Node<E>>, usize)> = vec![(Arc::clone(root), 0)];
    visited.insert(Arc::as_ptr(root));
    while let Some((node, idx)) = stack.pop() {
        if idx < node.parents.len() {
            let next = node.parents[idx].clone();
            stack.push((node, idx + 1));
            if let Some(p) = next {
                if visited.insert(Arc::as_ptr(&p)) {
                    stack.push((p, 0));
                }
            }
        } else {
            order.push(node);
        }
    }
    order
}

pub(crate) fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, format!("lhs shape {a:?} vs rhs shape {b:?}")));
    }
    Ok(())
}

pub(crate) fn expect_rank(op: &'static str, t: &[usize], rank: usize, what: &str) -> Result<()> {
    if t.len() != rank {
        return Err(Error::dim(op, format!("{what} must be rank {rank}, got shape {t:?}")));
    }
    Ok(())
}
