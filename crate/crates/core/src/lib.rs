//! Building blocks for compute-budgeted face recognition: angular-margin
//! losses with analytic gradients, quality-weighted set aggregation,
//! training-schedule utilities, an architecture flops counter and
//! verification metrics, plus a small synthetic experiment harness.
//!
//! All arithmetic is `f64`. Randomness comes from [`numeric::SeededRng`].

// `!(a > b)` is used on purpose so NaN takes the rejecting branch
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod archflops;
pub mod dynamics;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod numeric;
pub mod quality;

pub use numeric::{AnchorSet, Embedding, SeededRng};
