//! Unsupervised pattern detectors on CNN feature maps, turned into calibrated
//! out-of-distribution confidence measures.

// `!(x > 0.0)` is used on purpose so NaN lands in the rejecting branch
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod baselines;
pub mod calibration;
pub mod classifier;
pub mod config;
pub mod detectors;
pub mod error;
pub mod explain;
pub mod farc;
mod io;
pub mod metrics;
pub mod perturb;
pub mod pipeline;
pub mod ppm;
pub mod report;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
