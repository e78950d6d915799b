//! The noise-prediction interface and classifier-free guidance.
//!
//! Two implementations live here: [`GaussianOracle`], which returns the exact
//! posterior-mean noise for a Gaussian data prior, and [`ToyDenoiser`], a
//! small pre-norm transformer with text-image cross-attention and image
//! self-attention that exposes attention scores and key/value taps.

mod checkpoint;
mod gaussian;
mod transformer;

pub use checkpoint::{checkpoint_bytes, Checkpoint, checkpoint_hash, read_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use gaussian::{GaussianOracle, GaussianPrior};
pub use transformer::{
    BlockWeights, ForwardTape, ModelDims, ToyDenoiser, ToyDenoiserWeights, WeightGrads,
};

use ndarray::{Array2, Array3, Zip};

use crate::cache::InjectionSlice;
use crate::error::{Error, Result};
use crate::prompt::PromptEmbedding;
use crate::schedule::LatentState;

/// One call into a noise predictor.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserRequest<'a> {
    pub latent: &'a LatentState,
    pub prompt: &'a PromptEmbedding,
    pub injection: Option<InjectionSlice<'a>>,
    pub record_attention: bool,
}

impl<'a> DenoiserRequest<'a> {
    pub fn new(latent: &'a LatentState, prompt: &'a PromptEmbedding) -> Self {
        Self {
            latent,
            prompt,
            injection: None,
            record_attention: false,
        }
    }

    pub fn with_injection(mut self, injection: Option<InjectionSlice<'a>>) -> Self {
        self.injection = injection;
        self
    }

    pub fn recording(mut self, on: bool) -> Self {
        self.record_attention = on;
        self
    }

    pub fn timestep(&self) -> usize {
        self.latent.timestep
    }
}

/// Attention taps of one transformer layer at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer_index: usize,
    pub timestep: usize,
    /// Post-softmax text-image weights `[visual_tokens, text_tokens]`, averaged over heads.
    pub text_image_scores: Array2<f64>,
    pub self_keys: Array2<f64>,
    pub self_values: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserResponse {
    pub eps: Array3<f64>,
    /// Per batch item, per layer. `None` unless recording was requested.
    pub attention_records: Option<Vec<Vec<AttentionRecord>>>,
}

/// A noise predictor `eps_theta(x_t, t, prompt)`.
pub trait Denoiser: Sync {
    fn predict(&self, req: &DenoiserRequest<'_>) -> Result<DenoiserResponse>;

    /// Number of attention layers (0 for attention-free predictors).
    fn layer_count(&self) -> usize {
        0
    }
}

/// `(1 - s) * eps_null + s * eps_cond`; `s = 0` and `s = 1` return the
/// corresponding branch bit for bit.
pub fn combine_guidance(eps_cond: &Array3<f64>, eps_null: &Array3<f64>, scale: f64) -> Array3<f64> {
    if scale == 0.0 {
        return eps_null.clone();
    }
    if scale == 1.0 {
        return eps_cond.clone();
    }
    Zip::from(eps_cond)
        .and(eps_null)
        .map_collect(|&c, &u| u + scale * (c - u))
}

/// Classifier-free guidance `eps_null + s * (eps_cond - eps_null)`.
pub fn guided_eps(
    denoiser: &dyn Denoiser,
    req_cond: &DenoiserRequest<'_>,
    req_null: &DenoiserRequest<'_>,
    scale: f64,
) -> Result<Array3<f64>> {
    if req_cond.latent.timestep != req_null.latent.timestep
        || req_cond.latent.data != req_null.latent.data
    {
        return Err(Error::precondition("guidance branches must share latent and timestep"));
    }
    if !req_null.prompt.is_null {
        return Err(Error::precondition("unconditional branch must use the null prompt"));
    }
    let eps_null = denoiser.predict(req_null)?.eps;
    if scale == 0.0 {
        return Ok(eps_null);
    }
    let eps_cond = denoiser.predict(req_cond)?.eps;
    Ok(combine_guidance(&eps_cond, &eps_null, scale))
}

/// Predicts the same constant noise everywhere. Makes the step-map
/// cancellation identities exact inside the sampling loops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantDenoiser {
    pub value: f64,
}

impl Denoiser for ConstantDenoiser {
    fn predict(&self, req: &DenoiserRequest<'_>) -> Result<DenoiserResponse> {
        Ok(DenoiserResponse {
            eps: Array3::from_elem(req.latent.data.raw_dim(), self.value),
            attention_records: None,
        })
    }
}
