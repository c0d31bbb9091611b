//! Layer-adaptive progressive filter pruning.
//!
//! A CNN is trained from scratch with every prunable convolution replaced by
//! a sparse module with bypass compensation ([`sbc::SbcModule`]). Learnable
//! per-module thresholds on filter ℓ1 norms decide which filters survive,
//! while a FLOPs regularizer drives the network toward a target compression
//! rate. Once the target is reached the masked network is converted into a
//! compact one ([`surgery`]) and training continues on it.

pub mod builder;
pub mod controller;
pub mod error;
pub mod flops;
pub mod harness;
pub mod masking;
pub mod network;
pub mod nn;
pub mod optim;
pub mod report;
pub mod sbc;
mod scalar;
pub mod surgery;

pub use error::{LappError, Result};
pub use scalar::Scalar;
