//! Variational diffusion autoencoders.
//!
//! The pipeline embeds a point cloud with a diffusion map, fits an encoder,
//! a covariance network and a decoder to one step of the diffusion random
//! walk, and generates new points by iterating the learned walk.

// Negated comparisons are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod container;
pub mod data;
pub mod error;
pub mod metrics;
pub mod neural;
pub mod rng;
pub mod spectral;
pub mod vdae;

pub use data::PointCloud;
pub use error::{Error, Result};
