//! Masked discrete diffusion sequence models with policy-gradient
//! post-training objectives, samplers, toy verifiable-reward tasks and an
//! evaluation harness.

pub mod config;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod likelihood;
pub mod mdm;
pub mod pipeline;
pub mod rl;
pub mod rng;
pub mod samplers;
pub mod tasks;

pub use error::{Error, Result};
