//! Dual-encoder contrastive image-text learning for road damage, with an
//! orientation-aware positional encoding and learnable concept prototypes,
//! trained on a procedurally generated benchmark.

pub mod concepts;
pub mod dape;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod image;
pub mod harness;
pub mod losses;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod synthbench;
pub mod tensor;

pub use error::{Error, Result};
