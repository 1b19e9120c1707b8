//! Adaptive-rank low-rank adaptation scored by integrated gradients along the
//! adapter path, smoothed into per-entry signal-to-noise ratios.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod linalg;
pub mod model;
pub mod ig;
pub mod score;
pub mod alloc;
pub mod tasks;
pub mod trainer;
pub mod experiments;

pub use error::{Error, Result};
