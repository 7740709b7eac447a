//! Desk-scale laboratory for transformer regression under structured
//! distribution shift: synthetic reasoning tasks, a scalar-token decoder
//! transformer with its own reverse-mode autodiff, exact Wasserstein-1
//! measurement, and the Gevrey-class bound calculus.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod gevrey;
pub mod model;
pub mod quadrature;
pub mod tasks;
pub mod trainer;
pub mod transport;

pub use error::{Error, Result};
