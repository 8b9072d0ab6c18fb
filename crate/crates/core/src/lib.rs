//! Mixture-of-experts anomaly detection over frozen patch features.
//!
//! Features arrive as bundles of patch tokens and a class token. A top-K router
//! dispatches each image to patch, component and global reconstruction experts,
//! whose error maps are fused into a pixel-level anomaly map and an image score.

pub mod component_kb;
pub mod eir;
pub mod error;
pub mod experts;
pub mod feature_io;
pub mod nn;
pub mod optim;
pub mod params;
pub mod router;
pub mod scoring_eval;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
