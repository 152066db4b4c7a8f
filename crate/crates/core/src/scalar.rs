//! Scalar abstraction: all math in this crate is generic over `f32`/`f64`.
//!
//! Default compute precision is `f32`; verification (oracles, finite
//! differences) runs at `f64`. See the `Tensor32`/`Tensor64` aliases at the
//! crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point scalar usable as a tensor element: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Guard for normalizations and denominators: 1e-6 at f32, 1e-12 at f64.
    fn default_eps() -> Self;

    fn from_f64_lossy(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    fn sample_standard_normal<R: Rng>(rng: &mut R) -> Self;

    fn sample_unit<R: Rng>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    fn default_eps() -> Self {
        1e-6
    }

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    fn sample_standard_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn sample_unit<R: Rng>(rng: &mut R) -> Self {
        rng.random()
    }
}

impl Scalar for f64 {
    fn default_eps() -> Self {
        1e-12
    }

    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn sample_standard_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn sample_unit<R: Rng>(rng: &mut R) -> Self {
        rng.random()
    }
}

/// Relative error with a floored denominator, used by every oracle and
/// gradient comparison in the crate: |a - b| / max(|a|, |b|, 1e-8).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(1e-8))
}
