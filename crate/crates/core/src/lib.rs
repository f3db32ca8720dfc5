//! Desk-scale model compression laboratory.
//!
//! The crate trains small residual CNNs and MLPs with a tape-based
//! reverse-mode autodiff core, prunes them iteratively (l1 filter ranking or
//! global magnitude), retrains each cycle under a large-learning-rate
//! one-cycle policy, assembles the per-cycle snapshots into an ensemble, and
//! distills the ensemble into the final compact network.

// `!(x > 0.0)` rejects NaN together with the out-of-range values; the
// negated form is deliberate wherever a finite positive number is required.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Indexed loops in the conv/batch-norm kernels mirror the stride arithmetic;
// iterator chains there hide which offsets move together.
#![allow(clippy::needless_range_loop)]

pub mod conv;
pub mod data;
pub mod error;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod prune;
pub mod rng;
pub mod snapshot_io;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
