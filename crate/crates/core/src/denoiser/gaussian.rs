use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3};

use super::{Denoiser, DenoiserRequest, DenoiserResponse};
use crate::error::{Error, Result};
use crate::prompt::PromptEmbedding;

/// Gaussian data prior `N(mean, cov)` over a flattened `[tokens, channels]` latent.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::config(format!(
                "covariance is {}x{}, mean has {d} entries",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let asym = (&cov - cov.transpose()).amax();
        if asym > 1e-12 * cov.amax().max(1.0) {
            return Err(Error::config("covariance is not symmetric"));
        }
        if cov.clone().cholesky().is_none() {
            return Err(Error::config("covariance is not positive definite"));
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov,
        })
    }

    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * variance)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// `E[x_0 | x_t]` for `x_t = sqrt(a) x_0 + sqrt(1 - a) eps`:
    /// `mu + sqrt(a) Sigma (a Sigma + (1 - a) I)^-1 (x_t - sqrt(a) mu)`.
    pub fn posterior_mean(&self, x_t: &DVector<f64>, alpha: f64) -> Result<DVector<f64>> {
        let d = self.dim();
        let sa = alpha.sqrt();
        let a = &self.cov * alpha + DMatrix::identity(d, d) * (1.0 - alpha);
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::numeric("marginal covariance lost positive definiteness"))?;
        let resid = x_t - &self.mean * sa;
        Ok(&self.mean + (&self.cov * chol.solve(&resid)) * sa)
    }

    /// Posterior-mean noise `(x_t - sqrt(a) E[x_0 | x_t]) / sqrt(1 - a)`.
    pub fn optimal_eps(&self, x_t: &DVector<f64>, alpha: f64) -> Result<DVector<f64>> {
        if alpha >= 1.0 {
            return Err(Error::precondition(
                "optimal noise is undefined at alpha_t = 1 (clean timestep)",
            ));
        }
        let x0 = self.posterior_mean(x_t, alpha)?;
        Ok((x_t - x0 * alpha.sqrt()) / (1.0 - alpha).sqrt())
    }
}

/// Analytic denoiser: the null prompt selects the unconditional prior and a
/// non-null prompt selects the conditional prior whose key embedding matches
/// it exactly.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    tokens: usize,
    channels: usize,
    alphas: Vec<f64>,
    unconditional: GaussianPrior,
    conditions: Vec<(Array2<f64>, GaussianPrior)>,
}

impl GaussianOracle {
    pub fn new(
        tokens: usize,
        channels: usize,
        alphas: &[f64],
        unconditional: GaussianPrior,
    ) -> Result<Self> {
        if unconditional.dim() != tokens * channels {
            return Err(Error::config("prior dimension does not match the latent grid"));
        }
        Ok(Self {
            tokens,
            channels,
            alphas: alphas.to_vec(),
            unconditional,
            conditions: Vec::new(),
        })
    }

    pub fn with_condition(mut self, key: &PromptEmbedding, prior: GaussianPrior) -> Result<Self> {
        if prior.dim() != self.tokens * self.channels {
            return Err(Error::config("prior dimension does not match the latent grid"));
        }
        self.conditions.push((key.matrix.clone(), prior));
        Ok(self)
    }

    fn resolve(&self, prompt: &PromptEmbedding) -> Result<&GaussianPrior> {
        if prompt.is_null {
            return Ok(&self.unconditional);
        }
        self.conditions
            .iter()
            .find(|(key, _)| *key == prompt.matrix)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::config("prompt does not resolve to any Gaussian condition"))
    }
}

impl Denoiser for GaussianOracle {
    fn predict(&self, req: &DenoiserRequest<'_>) -> Result<DenoiserResponse> {
        let prior = self.resolve(req.prompt)?;
        let t = req.latent.timestep;
        let alpha = *self
            .alphas
            .get(t)
            .ok_or_else(|| Error::precondition(format!("timestep {t} outside the oracle schedule")))?;
        let shape = req.latent.data.dim();
        if shape.1 != self.tokens || shape.2 != self.channels {
            return Err(Error::config("latent grid does not match the oracle"));
        }
        let per = self.tokens * self.channels;
        let mut eps = Array3::zeros(shape);
        for b in 0..shape.0 {
            let item = req.latent.data.index_axis(ndarray::Axis(0), b);
            let x = DVector::from_iterator(per, item.iter().copied());
            let e = prior.optimal_eps(&x, alpha)?;
            for (dst, src) in eps.index_axis_mut(ndarray::Axis(0), b).iter_mut().zip(e.iter()) {
                *dst = *src;
            }
        }
        Ok(DenoiserResponse {
            eps,
            attention_records: None,
        })
    }
}
