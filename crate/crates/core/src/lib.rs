//! Point-cloud decomposition into basic shapes (plane, sphere, cylinder,
//! cone) with a local proximity encoder and stacked self-attention, plus a
//! frozen-feature object classifier.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`tensor`]), layers and Adam ([`nn`]), point-cloud I/O and augmentation
//! ([`pointcloud`]), kd-tree neighborhoods ([`neighborhood`]), the model
//! blocks ([`lpe`], [`afe`], [`heads`], [`model`]), a synthetic labeled data
//! generator ([`datagen`]) and the training/evaluation harness
//! ([`pipeline`]).

pub mod afe;
pub mod datagen;
pub mod error;
pub mod geom;
pub mod heads;
pub mod lpe;
pub mod model;
pub mod neighborhood;
pub mod nn;
pub mod pipeline;
pub mod pointcloud;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Scalar, Tensor, Var};
