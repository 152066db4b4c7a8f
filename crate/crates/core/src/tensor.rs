//! Dense row-major tensor, the carrier for all math in this crate.
//!
//! Every tensor allocation is registered with a thread-local element counter
//! (see [`alloc_stats`]) so the scaling benchmark can report peak transient
//! buffer sizes deterministically, without touching OS memory stats.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

/// Thread-local live-element accounting for all `Tensor` buffers.
///
/// `reset` zeroes both counters; allocations made while inputs are already
/// live may therefore drive the current count negative after those inputs
/// drop, which is why the counters are signed.
pub mod alloc_stats {
    use std::cell::Cell;

    thread_local! {
        static CURRENT: Cell<i64> = const { Cell::new(0) };
        static PEAK: Cell<i64> = const { Cell::new(0) };
    }

    /// Zero the counters. Call after allocating kernel inputs to measure
    /// only the transient buffers a kernel allocates internally.
    pub fn reset() {
        CURRENT.set(0);
        PEAK.set(0);
    }

    pub fn current_elements() -> i64 {
        CURRENT.get()
    }

    pub fn peak_elements() -> i64 {
        PEAK.get()
    }

    pub(super) fn register(n: usize) {
        let cur = CURRENT.get() + n as i64;
        CURRENT.set(cur);
        if cur > PEAK.get() {
            PEAK.set(cur);
        }
    }

    pub(super) fn unregister(n: usize) {
        CURRENT.set(CURRENT.get() - n as i64);
    }
}

/// Dense n-dimensional array of scalars in row-major order.
///
/// Shape extents must be positive; the empty shape `[]` is a scalar holding
/// one element. Tensors are immutable in spirit: ops return new tensors, and
/// `data_mut` exists for kernels and in-place test setup only.
#[derive(Debug)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(CoreError::dim("tensor", format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::dim(
                "tensor",
                format!("shape {shape:?} wants {numel} elements, data has {}", data.len()),
            ));
        }
        alloc_stats::register(data.len());
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        alloc_stats::register(numel);
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); numel] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, T::one())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        alloc_stats::register(numel);
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Self::filled(&[], value)
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn<R: Rng>(shape: &[usize], std: T, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        alloc_stats::register(numel);
        let data = (0..numel).map(|_| T::sample_standard_normal(rng) * std).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    /// Uniform samples in [0, 1).
    pub fn rand_unit<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        alloc_stats::register(numel);
        let data = (0..numel).map(|_| T::sample_unit(rng)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// The single element of a scalar (or one-element) tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(CoreError::dim("item", format!("tensor of shape {:?} is not scalar", self.shape)));
        }
        Ok(self.data[0])
    }

    /// Same data, new shape; element count must match.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape.to_vec(), self.data.clone())
    }

    pub fn convert<U: Scalar>(&self) -> Tensor<U> {
        alloc_stats::register(self.data.len());
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element at a full multi-index (test helper; kernels index flat data).
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range at axis {i}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub(crate) fn map(&self, f: impl Fn(T) -> T) -> Self {
        alloc_stats::register(self.data.len());
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub(crate) fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        alloc_stats::register(self.data.len());
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        alloc_stats::register(self.data.len());
        Tensor { shape: self.shape.clone(), data: self.data.clone() }
    }
}

impl<T: Scalar> Drop for Tensor<T> {
    fn drop(&mut self) {
        alloc_stats::unregister(self.data.len());
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}
