//! Post-training quantization for anchor-based object detectors.
//!
//! The crate bundles everything needed to run the experiment end to end at
//! desk scale: a small autodiff tensor engine, affine fake quantization with
//! Lp scale search and learned rounding, a toy single-stage detector with its
//! post-processing, the detection output loss used to pick a reconstruction
//! metric per block, the block-wise quantization driver, and a synthetic
//! shapes dataset with its trainer and file formats.

pub mod detptq;
pub mod error;
pub mod experiments;
pub mod odol;
pub mod quant;
pub mod synthdata;
pub mod tensor;
pub mod toydet;

pub use error::{Error, Result};

/// Version string embedded in every emitted artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
