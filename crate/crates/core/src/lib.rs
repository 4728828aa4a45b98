//! Federated mutual distillation between private per-client teachers and a
//! shared student, with negative-knowledge and contrastive losses and
//! energy-thresholded SVD gradient compression.

pub mod compression;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod nn;

pub use error::{Error, Result};
