//! Regularized kernelized EM reconstruction for emission tomography.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dictionary;
pub mod error;
pub mod graph;
pub mod image;
pub mod kernel;
pub mod linalg;
pub mod metrics;
mod par;
pub mod phantom;
pub mod pipeline;
pub mod projector;
pub mod recon;

pub use error::{Error, Result};
pub use image::Image;
