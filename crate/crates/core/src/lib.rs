//! Meta-learned, calibrated few-shot regression.
//!
//! A Gaussian process with a neural deep kernel is adapted to each task in
//! closed form from a handful of labeled support instances. Its Gaussian
//! predictive CDF is then recalibrated per task by the CDF of a Gaussian
//! mixture placed on the support instances' own CDF values, and the
//! calibrated and uncalibrated CDFs are mixed. All task-shared parameters
//! are meta-trained end-to-end on query-set regression and calibration
//! errors.
// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod app;
pub mod calibration;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
