//! Spatially aware linear attention for jet tagging.
//!
//! The crate is layered bottom-up: [`tensor`] and [`autodiff`] provide the
//! numeric core, [`jet`] the particle data pipeline, [`attention`] the three
//! attention kernels, [`model`] whole classifiers, [`train`] and [`metrics`]
//! the learning harness, and [`profiler`] the analytic cost model.

pub mod attention;
pub mod autodiff;
pub mod error;
pub mod jet;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod profiler;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
