//! Deep cascaded regression for facial landmark alignment.
//!
//! The pipeline has three parts:
//!
//! 1. an encode-decode convolutional network ([`network`]) whose output
//!    maps have the input's size, with a head that predicts one
//!    probability map per landmark ([`maps`]);
//! 2. an initialization search: the per-landmark argmax of those maps is
//!    matched against a k-means shape space ([`shape_space`]);
//! 3. a cascade of linear regressors ([`cascade`]) on shape-indexed
//!    pooled features ([`sip`]) that refines the initial shape.
//!
//! Everything runs on a small deterministic autodiff engine ([`graph`])
//! in double precision. [`pipeline`] ties the parts together for
//! training, prediction and evaluation.

pub mod cascade;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod maps;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod pipeline;
pub mod shape;
pub mod shape_space;
pub mod sip;
pub mod tensor;

pub use error::{Error, Result};
pub use shape::{LandmarkShape, Point};
pub use tensor::{Dims, Tensor};
