//! Distributed consensus-ADMM training of Gaussian-splat scene models.
//!
//! The scene is split into overlapping blocks, each block is trained by an
//! independent worker, and Gaussians that live in more than one block are
//! driven to a single global value through scaled consensus ADMM.

pub mod admm;
pub mod codec;
pub mod error;
pub mod metrics;
pub mod par;
pub mod render;
pub mod report;
pub mod runtime;
pub mod scene;
pub mod split;
pub mod synth;
#[doc(hidden)]
pub mod testing;
pub mod trainer;

pub use error::{Error, Result};
