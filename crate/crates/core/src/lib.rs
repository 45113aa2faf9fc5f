//! Allocation-only core of a desk-scale camera semantic scene completion
//! pipeline: a small reverse-mode tensor engine, a synthetic scene and
//! encoder-prior generator, geometry-biased attention, disparity-to-depth
//! volume mapping, lift-splat view transformation with deformable
//! refinement, axis-aware fusion, the training objective and IoU metrics.
//!
//! Everything here is `no_std` + `alloc`; file formats, the CLI and
//! threading live in the companion `ssc-tools` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod config;
pub mod depth;
pub mod error;
pub mod fusion;
pub mod geo;
pub mod gradcheck;
pub mod graph;
pub mod losses;
mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod param;
pub mod scene;
pub mod suite;
pub mod tensor;
pub mod train;
pub mod view;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use param::{AdamConfig, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
