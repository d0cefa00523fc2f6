//! Allocation-only numerics for attention-guided training-set curation.
//!
//! The pipeline turns exported feature maps `F` and attribution grids `A`
//! into a balanced training subset:
//!
//! 1. [`attention`] weights `F` by `A` (and by `1 - A`) and pools the result.
//! 2. [`embed`] projects the attention-weighted vectors into a low-dimensional
//!    attention space.
//! 3. [`cluster`] partitions that space and picks one representative per
//!    cluster for a yes/no attention-correctness question.
//! 4. [`spread`] propagates the answers to every instance.
//! 5. [`curation`] screens out wrongly-attended instances, clusters the core
//!    and environment spaces and draws a consistency-weighted subset.
//! 6. [`linear`] retrains a final linear layer on the subset and
//!    [`metrics`] scores it.
//!
//! [`synth`] implements a planted core/spurious patch data model together with
//! a two-layer cubic convolutional network, which gives the whole pipeline a
//! ground truth to be checked against.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the annotation
//! service and the command line live in the `slim` crate.

#![no_std]
#![forbid(unsafe_code)]
// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attention;
pub mod cluster;
pub mod curation;
pub mod embed;
mod error;
pub mod linalg;
pub mod linear;
pub mod metrics;
mod rng;
pub mod spread;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use tensor::Tensor;
