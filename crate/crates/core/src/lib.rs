//! Asymmetric zigzag sampling lab.
//!
//! A token-grid diffusion sandbox: DDIM step maps, an analytic Gaussian
//! denoiser, a tiny trainable transformer denoiser, the identity token cache
//! with key/value injection, asymmetric prompt guidance, the zigzag sampler
//! with its ablation variants, the synthetic story world, and toy metrics.

pub mod attention;
pub mod cache;
pub mod denoiser;
pub mod error;
pub mod metrics;
pub mod prompt;
pub mod runner;
pub mod sampler;
pub mod schedule;
pub mod world;

pub use error::{Error, Result};
