//! Region-aware initial-noise prediction for regional text-to-image
//! generation, at desk scale.
//!
//! A frozen NPNet-style surrogate turns Gaussian noise into a "golden"
//! latent; a trainable adapter stack (region FiLM, region cross-attention
//! and a confidence gate) makes that latent follow a column layout of
//! sub-prompts. Everything runs on CPU in f64.

pub mod adapter;
pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod persist;
pub mod pipeline;
pub mod report;
pub mod seed;
pub mod selftest;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
