//! Dense row-major tensors with optional gradient accumulators.
//!
//! Data buffers are shared (`Arc`) so cloning a tensor onto an autodiff tape
//! is cheap; mutation goes through [`Tensor::data_mut`], which copies only
//! when the buffer is aliased. Gradient buffers live behind a mutex so
//! backward passes on disjoint tapes may accumulate into the same leaf from
//! different threads.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub fn dims_product(dims: &[usize]) -> usize {
    dims.iter().product()
}

pub fn dims_str(dims: &[usize]) -> String {
    let parts: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
    parts.join("x")
}

#[derive(Clone, Debug)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Arc<Vec<f64>>,
    grad: Option<Arc<Mutex<Vec<f64>>>>,
    id: u64,
}

impl Tensor {
    /// Build a tensor from explicit dims and a row-major buffer.
    /// Every dim must be positive and the buffer length must match.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "tensor dims must be positive, got {}",
                dims_str(&dims)
            )));
        }
        let want = dims_product(&dims);
        if want != data.len() {
            return Err(Error::Shape(format!(
                "dims {} imply {} elements but buffer has {}",
                dims_str(&dims),
                want,
                data.len()
            )));
        }
        Ok(Tensor { dims, data: Arc::new(data), grad: None, id: fresh_id() })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims_product(dims);
        Tensor::new(dims.to_vec(), vec![0.0; n]).expect("zeros: positive dims required")
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims_product(dims);
        Tensor::new(dims.to_vec(), vec![value; n]).expect("full: positive dims required")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).unwrap()
    }

    /// Uniform values in [lo, hi) drawn from the given generator.
    pub fn rand_uniform<R: Rng>(dims: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = dims_product(dims);
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(dims.to_vec(), data).expect("rand_uniform: positive dims required")
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn elem_count(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the buffer; copies it first if any tape or clone
    /// still aliases it, so other holders never observe the edit.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Identity of this tensor on tapes. Clones share the id; `deep_copy`
    /// gets a fresh one.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Mark as trainable: allocates a zeroed gradient accumulator.
    pub fn with_grad(mut self) -> Self {
        let n = self.data.len();
        self.grad = Some(Arc::new(Mutex::new(vec![0.0; n])));
        self
    }

    /// Snapshot of the accumulated gradient, if this tensor is trainable.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.grad.as_ref().map(|g| g.lock().expect("grad lock poisoned").clone())
    }

    pub fn zero_grad(&self) {
        if let Some(g) = &self.grad {
            for v in g.lock().expect("grad lock poisoned").iter_mut() {
                *v = 0.0;
            }
        }
    }

    /// Add `delta` into the gradient accumulator. Gradients accumulate across
    /// backward calls until `zero_grad` resets them.
    pub fn accumulate_grad(&self, delta: &[f64]) {
        if let Some(g) = &self.grad {
            let mut guard = g.lock().expect("grad lock poisoned");
            debug_assert_eq!(guard.len(), delta.len());
            for (slot, d) in guard.iter_mut().zip(delta) {
                *slot += d;
            }
        }
    }

    /// Independent copy with fresh buffers, fresh id, and (if trainable) a
    /// fresh zeroed gradient.
    pub fn deep_copy(&self) -> Self {
        let mut t = Tensor::new(self.dims.clone(), self.data.as_ref().clone())
            .expect("deep_copy preserves valid dims");
        if self.grad.is_some() {
            t = t.with_grad();
        }
        t
    }

    /// Same buffer viewed under new dims (element count must match).
    /// This is the non-differentiable variant used for data plumbing;
    /// tape-tracked reshape lives on [`crate::tape::Tape`].
    pub fn with_dims(&self, dims: Vec<usize>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "tensor dims must be positive, got {}",
                dims_str(&dims)
            )));
        }
        if dims_product(&dims) != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot view {} elements as {}",
                self.data.len(),
                dims_str(&dims)
            )));
        }
        Ok(Tensor { dims, data: Arc::clone(&self.data), grad: None, id: fresh_id() })
    }

    /// Row-major offset of a multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            debug_assert!(ix < self.dims[i]);
            off = off * self.dims[i] + ix;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest element; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff: dims differ");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of dims and payload, for determinism tests.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
