//! Dense f32 tensors with a minimal reverse-mode autodiff engine.
//!
//! A [`Tensor`] is an immutable row-major buffer plus shape. Differentiable
//! operations live on [`Tape`]; running them records enough to replay the
//! graph backwards. Gradients for `requires_grad` leaves accumulate into the
//! tensor's grad cell, everything else flows through a transient workspace.

mod gradcheck;
pub mod ops;
pub mod rng;
mod tape;

pub use gradcheck::{gradcheck, gradcheck_multi};
pub use rng::Rng;
pub use tape::Tape;

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Worker threads used by the heavy kernels (conv2d / batched matmul).
/// 1 = fully serial. Results are bit-identical for every setting because
/// parallelism only ever partitions disjoint output regions.
static THREADS: AtomicUsize = AtomicUsize::new(1);

pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    /// Leaf parameter: backward deposits its gradient here.
    requires_grad: bool,
    /// Participates in the recorded graph (leaf param or derived from one).
    tracked: bool,
    /// Pre-rounding f64 value of scalar reductions, kept so the
    /// finite-difference oracle sees full accumulation precision.
    precise: Option<f64>,
    grad: Mutex<Option<Vec<f32>>>,
}

/// Dense row-major f32 tensor. Cloning is cheap (shared buffer); the buffer
/// is immutable after creation, only the grad cell ever mutates.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::dim(
            "tensor",
            format!("zero-sized dimension in shape {shape:?}"),
        ));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::dim(
            "tensor",
            format!("shape {shape:?} implies {n} elements, buffer has {len}"),
        ));
    }
    Ok(())
}

impl Tensor {
    fn build(data: Arc<Vec<f32>>, shape: Vec<usize>, requires_grad: bool, tracked: bool) -> Tensor {
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                tracked,
                precise: None,
                grad: Mutex::new(None),
            }),
        }
    }

    /// Scalar op output that remembers its f64 value (crate-internal).
    pub(crate) fn derived_scalar(value: f64, tracked: bool) -> Tensor {
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: vec![1],
                data: Arc::new(vec![value as f32]),
                requires_grad: false,
                tracked,
                precise: Some(value),
                grad: Mutex::new(None),
            }),
        }
    }

    /// Plain data leaf (no gradient).
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::build(Arc::new(data), shape.to_vec(), false, false))
    }

    /// Learnable leaf: backward will accumulate its gradient.
    pub fn param(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::build(Arc::new(data), shape.to_vec(), true, true))
    }

    /// Output of a recorded op (crate-internal).
    pub(crate) fn derived(data: Vec<f32>, shape: Vec<usize>, tracked: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor::build(Arc::new(data), shape, false, tracked)
    }

    /// Derived tensor sharing this tensor's buffer under a new shape.
    pub(crate) fn derived_view(&self, shape: Vec<usize>, tracked: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), self.numel());
        Tensor::build(self.inner.data.clone(), shape, false, tracked)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::build(Arc::new(vec![0.0; n]), shape.to_vec(), false, false)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor::build(Arc::new(vec![value; n]), shape.to_vec(), false, false)
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::build(Arc::new(vec![value]), vec![1], false, false)
    }

    /// Normal(mean, std) leaf drawn from the given stream.
    pub fn randn(shape: &[usize], mean: f32, std: f32, rng: &mut Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        rng.fill_normal(&mut data, mean, std);
        Tensor::build(Arc::new(data), shape.to_vec(), false, false)
    }

    /// Like [`Tensor::randn`] but as a learnable parameter.
    pub fn randn_param(shape: &[usize], mean: f32, std: f32, rng: &mut Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        rng.fill_normal(&mut data, mean, std);
        Tensor::build(Arc::new(data), shape.to_vec(), true, true)
    }

    pub fn zeros_param(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::build(Arc::new(vec![0.0; n]), shape.to_vec(), true, true)
    }

    pub fn ones_param(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::build(Arc::new(vec![1.0; n]), shape.to_vec(), true, true)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_tracked(&self) -> bool {
        self.inner.tracked
    }

    /// Value of a 1-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data[0]
    }

    /// Scalar value at accumulation precision (f64 where the producing op
    /// reduced in f64, otherwise the widened f32).
    pub fn item_f64(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item_f64() on non-scalar tensor");
        self.inner.precise.unwrap_or(self.inner.data[0] as f64)
    }

    /// Untracked leaf sharing this tensor's buffer. Cuts the graph: ops on
    /// the detached handle record nothing upstream of it.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.inner.data.clone(), self.inner.shape.clone(), false, false)
    }

    /// Copy of this tensor's data as a fresh learnable leaf.
    pub fn to_param(&self) -> Tensor {
        Tensor::build(
            Arc::new(self.inner.data.as_ref().clone()),
            self.inner.shape.clone(),
            true,
            true,
        )
    }

    /// Snapshot of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    /// Adds `delta` into the grad cell (allocating it on first use).
    pub fn accumulate_grad(&self, delta: &[f32]) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.inner.grad.lock().unwrap();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Max |x| over the buffer.
    pub fn max_abs(&self) -> f32 {
        self.inner.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }
}
