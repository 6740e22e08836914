//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted n-dimensional buffer.
//! Operations on tensors that track gradients record a node holding the
//! parents and a backward closure; [`Tensor::backward`] walks the recorded
//! graph once in reverse creation order and accumulates gradients into the
//! leaves that were created with `requires_grad`.
//!
//! Determinism: all kernels run on the calling thread with a fixed loop
//! order, and GEMM reductions run in the order `matrixmultiply` defines for a
//! given shape and stride set, so identical inputs produce bit-identical
//! outputs and gradients. Gradients flowing into one tensor from several
//! consumers are summed in reverse creation order of the consumers.
//!
//! Training runs in `f32`; every operation is generic over [`Scalar`] so the
//! same code can be evaluated in `f64` for gradient and oracle checks.

mod conv;
pub mod gemm;
mod linalg;
mod nn;
mod ops;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use num_traits::Float;

use crate::error::{Error, Result};
pub use gemm::{Gemm, Layout};

/// Floating point element type (`f32` for training, `f64` for verification).
pub trait Scalar:
    Float + Gemm + Default + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum + 'static
{
    const NAME: &'static str;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Gradient callback: `(output data, output grad, which parents need grads)`
/// to one optional gradient buffer per parent.
pub type BackwardFn<T> = Box<dyn Fn(&[T], &[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T: Scalar> {
    op: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

pub struct Tensor<T: Scalar = f32>(Arc<Inner<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("dtype", &T::NAME)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.node.as_ref().map(|n| n.op))
            .finish()
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on this thread until the guard is dropped.
pub struct NoGradGuard {
    prev: bool,
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
    }

    /// Constant tensor (never receives a gradient).
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates a gradient on [`Tensor::backward`].
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(Self::build(t.0.shape.clone(), t.0.data.clone(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![T::zero(); numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::build(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(vec![], vec![value], false, None)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    /// Records the result of a custom operation. A graph node is attached
    /// only when recording is enabled and some parent tracks gradients.
    pub fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let node = if grad_enabled() && parents.iter().any(|p| p.tracks_grad()) {
            Some(Node { op, parents, backward })
        } else {
            None
        };
        Self::build(shape, data, false, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True for leaves with `requires_grad` and for recorded op outputs.
    pub fn tracks_grad(&self) -> bool {
        self.0.requires_grad || self.0.node.is_some()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Same data, no graph history.
    pub fn detach(&self) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// New leaf with the same shape and `requires_grad` flag, holding `data`.
    pub fn with_data(&self, data: Vec<T>) -> Result<Self> {
        if data.len() != self.numel() {
            return Err(Error::dim(format!(
                "replacement buffer of {} elements for shape {:?}",
                data.len(),
                self.shape()
            )));
        }
        Ok(Self::build(self.0.shape.clone(), data, self.0.requires_grad, None))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.0.data.iter().map(|v| U::from_f64(v.as_f64())).collect();
        Tensor::build(self.0.shape.clone(), data, self.0.requires_grad, None)
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from a one-element tensor.
    ///
    /// Gradients are added to any gradient already stored on each leaf, so
    /// repeated calls without [`Tensor::zero_grad`] sum.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.tracks_grad() {
            return Ok(());
        }

        // Parents are always created before children, so descending id is a
        // valid reverse topological order.
        let mut reachable: HashMap<u64, Tensor<T>> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if reachable.contains_key(&t.0.id) {
                continue;
            }
            if let Some(node) = &t.0.node {
                for p in &node.parents {
                    if p.tracks_grad() && !reachable.contains_key(&p.0.id) {
                        stack.push(p.clone());
                    }
                }
            }
            reachable.insert(t.0.id, t);
        }
        let mut order: Vec<Tensor<T>> = reachable.into_values().collect();
        order.sort_unstable_by(|a, b| b.0.id.cmp(&a.0.id));

        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.0.id, vec![T::one()]);
        for t in order {
            let Some(g) = pending.remove(&t.0.id) else {
                continue;
            };
            if t.0.requires_grad {
                let mut slot = t.0.grad.lock().expect("grad lock poisoned");
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                    None => *slot = Some(g.clone()),
                }
            }
            if let Some(node) = &t.0.node {
                let needs: Vec<bool> = node.parents.iter().map(|p| p.tracks_grad()).collect();
                let grads = (node.backward)(&t.0.data, &g, &needs);
                debug_assert_eq!(grads.len(), node.parents.len(), "op {}", node.op);
                for (p, pg) in node.parents.iter().zip(grads) {
                    let Some(pg) = pg else { continue };
                    if !p.tracks_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), p.numel(), "op {} grad size", node.op);
                    match pending.get_mut(&p.0.id) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a = *a + *b),
                        None => {
                            pending.insert(p.0.id, pg);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn check_same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_buffer() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let x = Tensor::<f64>::param(&[3], vec![1.0, -2.0, 5.0]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn backward_square_gives_two_x() {
        let x = Tensor::<f64>::param(&[3], vec![1.0, -2.0, 5.0]).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 10.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        let loss = x.scale(3.0).sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, 6.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_on_non_scalar_is_usage_error() {
        let x = Tensor::<f32>::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(x.scale(1.0).backward(), Err(Error::Usage(_))));
    }

    #[test]
    fn diamond_graph_sums_both_paths() {
        let x = Tensor::<f64>::param(&[1], vec![3.0]).unwrap();
        let a = x.scale(2.0);
        let b = x.mul(&x).unwrap();
        a.add(&b).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0 + 6.0]);
    }

    #[test]
    fn no_grad_skips_recording() {
        let x = Tensor::<f32>::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = {
            let _g = no_grad();
            x.scale(2.0)
        };
        assert!(!y.tracks_grad());
        assert!(x.scale(2.0).tracks_grad());
    }
}
