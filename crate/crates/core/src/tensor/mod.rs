//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] owns a contiguous row-major buffer plus an optional gradient
//! buffer of the same shape. Results of differentiable operations keep a
//! record of the operation and its inputs; [`Tensor::backward`] walks that
//! tape once in reverse topological order and accumulates gradients
//! additively into the leaf tensors that require them.
//!
//! Tensors are reference-counted and confined to one thread. Precision is a
//! type parameter: the same code paths run at f32 (default compute) and f64
//! (verification and gradient checking).

mod conv;
mod ops;

pub(crate) use ops::Op;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Scalar element type of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    Copy
    + PartialOrd
    + PartialEq
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
}

/// Element precision tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

macro_rules! impl_element {
    ($t:ty, $dtype:expr) => {
        impl Element for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const DTYPE: Dtype = $dtype;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn from_f32(v: f32) -> Self {
                v as $t
            }
            #[inline]
            fn to_f32(self) -> f32 {
                self as f32
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_element!(f32, Dtype::F32);
impl_element!(f64, Dtype::F64);

/// Opaque identity of a tensor node, unique within the process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(u64);

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> TensorId {
    TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
}

thread_local! {
    static NO_GRAD_DEPTH: Cell<u32> = const { Cell::new(0) };
}

pub(crate) fn grad_recording_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get()) == 0
}

/// Runs `f` with operation recording disabled: results of tensor ops inside
/// the closure are plain leaves and never require gradients.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    let out = f();
    NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    out
}

struct Inner<T: Element> {
    id: TensorId,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: Cell<bool>,
    op: Option<Op<T>>,
}

/// Dense N-dimensional tensor, cheap to clone (shared buffer).
pub struct Tensor<T: Element> {
    inner: Rc<Inner<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

pub(crate) fn check_shape_positive(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::shape("tensor shape must have at least one dimension"));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!("non-positive dimension in shape {shape:?}")));
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    fn new_inner(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Option<Op<T>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value in tensor of shape {shape:?}"
        );
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                op,
            }),
        }
    }

    /// Leaf tensor from raw row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape_positive(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self::new_inner(shape.to_vec(), data, false, None))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::ZERO)
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        check_shape_positive(shape)?;
        let n: usize = shape.iter().product();
        Ok(Self::new_inner(shape.to_vec(), vec![value; n], false, None))
    }

    /// Shape-`[1]` scalar tensor.
    pub fn scalar(value: T) -> Self {
        Self::new_inner(vec![1], vec![value], false, None)
    }

    /// Result tensor of a recorded operation. Recording is skipped when no
    /// input requires a gradient or a [`no_grad`] scope is active.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Self {
        let record = grad_recording_enabled() && op.parents().iter().any(|p| p.requires_grad());
        if record {
            Self::new_inner(shape, data, true, Some(op))
        } else {
            Self::new_inner(shape, data, false, None)
        }
    }

    pub fn id(&self) -> TensorId {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false // shapes have no zero dims by construction
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Marks a leaf as requiring (or not requiring) gradients.
    pub fn set_requires_grad(&self, value: bool) {
        debug_assert!(self.inner.op.is_none(), "requires_grad is settable on leaves only");
        self.inner.requires_grad.set(value);
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the raw buffer (parameter updates, perturbations).
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.inner.data.borrow_mut()
    }

    /// Copies `values` into the tensor buffer.
    pub fn copy_from_slice(&self, values: &[T]) -> Result<()> {
        let mut data = self.data_mut();
        if data.len() != values.len() {
            return Err(Error::shape(format!(
                "copy_from_slice: have {} elements, got {}",
                data.len(),
                values.len()
            )));
        }
        data.copy_from_slice(values);
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.inner.grad.borrow()
    }

    pub fn has_grad(&self) -> bool {
        self.inner.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, &v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Value of a shape-`[1]` tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item() requires a scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Detached copy: new leaf with the same values, no gradient history.
    pub fn detach(&self) -> Tensor<T> {
        Self::new_inner(self.inner.shape.clone(), self.data().clone(), false, None)
    }

    /// Casts element-wise to another precision (detached leaf).
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|v| U::from_f64(v.to_f64())).collect();
        Tensor::new_inner(self.inner.shape.clone(), data, false, None)
    }

    pub(crate) fn op(&self) -> Option<&Op<T>> {
        self.inner.op.as_ref()
    }

    /// Reverse-mode gradient pass from a scalar loss.
    ///
    /// Accumulates `d loss / d leaf` additively into every leaf that requires
    /// a gradient. Repeated calls without [`Tensor::zero_grad`] keep
    /// accumulating.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            // Loss does not depend on any gradient-carrying leaf.
            return Ok(());
        }

        let order = self.reverse_topo();
        let mut flight: HashMap<TensorId, Vec<T>> = HashMap::new();
        flight.insert(self.id(), vec![T::ONE]);

        for node in &order {
            let Some(gout) = flight.remove(&node.id()) else {
                continue;
            };
            if let Some(op) = node.op() {
                op.backward(node, &gout, &mut flight);
            }
            if node.is_leaf() {
                node.accumulate_grad(&gout);
            }
        }
        Ok(())
    }

    /// Nodes of the recorded tape, loss first, every node before its inputs.
    fn reverse_topo(&self) -> Vec<Tensor<T>> {
        enum Frame<T: Element> {
            Enter(Tensor<T>),
            Exit(Tensor<T>),
        }
        let mut order = Vec::new();
        let mut seen: HashSet<TensorId> = HashSet::new();
        let mut stack = vec![Frame::Enter(self.clone())];
        while let Some(frame) = stack.pop() {
            match frame {
                Frame::Enter(t) => {
                    if !seen.insert(t.id()) {
                        continue;
                    }
                    stack.push(Frame::Exit(t.clone()));
                    if let Some(op) = t.op() {
                        for p in op.parents() {
                            if p.requires_grad() && !seen.contains(&p.id()) {
                                stack.push(Frame::Enter(p.clone()));
                            }
                        }
                    }
                }
                Frame::Exit(t) => order.push(t),
            }
        }
        order.reverse();
        order
    }
}

/// Accumulates in-flight gradients during a backward pass.
pub(crate) type GradSink<T> = HashMap<TensorId, Vec<T>>;

pub(crate) fn sink_buf<'a, T: Element>(
    sink: &'a mut GradSink<T>,
    t: &Tensor<T>,
) -> Option<&'a mut [T]> {
    if !t.requires_grad() {
        return None;
    }
    Some(sink.entry(t.id()).or_insert_with(|| vec![T::ZERO; t.len()]))
}
