//! Quality-adaptive image retrieval at desk scale.
//!
//! Paired clean/corrupted training data, a small convolutional encoder with a
//! quality compensation block, quality-aware margin softmax losses, and
//! Easy/Medium/Hard mAP evaluation, all in deterministic 64-bit arithmetic.

pub mod config;
pub mod corruption;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod gstmap;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod qcb;
pub mod retrieval;
pub mod synthset;
pub mod trainer;

pub use error::{Error, Result};
