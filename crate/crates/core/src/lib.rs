//! Multi-prompt alignment for multi-source unsupervised domain adaptation
//! over frozen image and text encoders.
//!
//! The pipeline works on precomputed image features: zero-shot pseudo-labels
//! for the target, one prompt pair per source domain, then two autoencoders
//! that align the learned prompts. A latent tuning mode adapts the aligned
//! prompts to further unlabeled domains.

pub mod align;
mod binio;
pub mod config;
pub mod embedstore;
pub mod encoder;
pub mod error;
pub mod lst;
pub mod manifest;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod prompt;
pub mod pseudo;
pub mod report;
pub mod seed;
pub mod stage1;
pub mod synthetic;
pub mod tape;
pub mod tensor;

pub use error::{MpaError, Result};
pub use tensor::Tensor;
