//! Thin-cloud removal on synthetic satellite-style imagery, built around an
//! O(N) multi-head linear attention kernel verified against a quadratic
//! softmax-attention reference.
//!
//! The crate is generic over the scalar type (`f32` for compute, `f64` for
//! verification); concrete aliases live at the crate root.

pub mod attention;
pub mod bench;
pub mod data;
pub mod error;
pub mod gan;
pub mod gradcheck;
pub mod ops;
pub mod metrics;
pub mod models;
pub mod oracles;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{CoreError, Result};
pub use scalar::{rel_err, Scalar};
pub use tape::{finite_diff_check, FdReport, Gradients, Param, Tape, ValueId};
pub use tensor::{alloc_stats, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
