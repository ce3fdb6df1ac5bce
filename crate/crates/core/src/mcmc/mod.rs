//! Random-walk Metropolis on the emulator-defined posterior
//!
//! ```text
//! Phi(theta) = 1/2 ||y~ - G~(theta)||^2_{Gamma~(theta)} + 1/2 log det Gamma~(theta)
//!            + 1/2 ||theta - m||^2_C
//! ```
//!
//! with `Gamma~(theta) = diag(GP variance) + D^{-1} V^T delta V D^{-1}`.
//! The log-determinant term is required because Gamma~ depends on theta.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::error::{check_dim, CesError, Result};
use crate::gp::Surrogate;
use crate::linalg;
use crate::noise::NoiseModel;
use crate::params::ParameterSpace;
use crate::seed;

mod summary;

pub use summary::{
    integrated_autocorr_time, posterior_summary, split_r_hat, CredibleRegions, ParamSummary,
    PosteriorSummary, HPD_LEVELS, MIN_REGION_SAMPLES,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiTerms {
    pub misfit: f64,
    pub log_det: f64,
    pub prior: f64,
}

impl PhiTerms {
    pub fn total(&self) -> f64 {
        self.misfit + self.log_det + self.prior
    }
}

/// Negative log posterior built from a surrogate.
pub struct Posterior<'a> {
    surrogate: &'a dyn Surrogate,
    noise: &'a NoiseModel,
    space: &'a ParameterSpace,
    y_tilde: DVector<f64>,
    log_det: bool,
    support: Option<Vec<(f64, f64)>>,
}

impl<'a> Posterior<'a> {
    /// `y_tilde` is the data in decorrelated coordinates.
    pub fn new(
        surrogate: &'a dyn Surrogate,
        noise: &'a NoiseModel,
        space: &'a ParameterSpace,
        y_tilde: DVector<f64>,
    ) -> Result<Self> {
        check_dim("decorrelated data", noise.dim(), y_tilde.len())?;
        check_dim("surrogate outputs", noise.dim(), surrogate.output_dim())?;
        check_dim("surrogate inputs", space.dim(), surrogate.input_dim())?;
        Ok(Posterior {
            surrogate,
            noise,
            space,
            y_tilde,
            log_det: true,
            support: None,
        })
    }

    /// Restricts the posterior to a computational-space box: Phi is infinite
    /// outside it and the surrogate is not queried there.
    pub fn with_support(mut self, ranges: Vec<(f64, f64)>) -> Result<Self> {
        check_dim("support box", self.space.dim(), ranges.len())?;
        if ranges.iter().any(|&(lo, hi)| !(lo < hi)) {
            return Err(CesError::InvalidInput(format!(
                "support box needs lower < upper, got {ranges:?}"
            )));
        }
        self.support = Some(ranges);
        Ok(self)
    }

    pub fn in_support(&self, theta: &DVector<f64>) -> bool {
        self.support.as_ref().is_none_or(|r| {
            theta
                .iter()
                .zip(r)
                .all(|(t, &(lo, hi))| lo <= *t && *t <= hi)
        })
    }

    /// Same posterior without the log-determinant term. Exists to demonstrate
    /// the bias that omitting it causes; never used by the pipeline.
    pub fn without_log_det(mut self) -> Self {
        self.log_det = false;
        self
    }

    pub fn space(&self) -> &ParameterSpace {
        self.space
    }

    pub fn terms(&self, theta: &DVector<f64>) -> Result<PhiTerms> {
        let (mean, var) = self.surrogate.predict(theta)?;
        let gamma = self.noise.gamma_tilde(&var)?;
        // One factorization serves both the quadratic form and log det.
        let chol = linalg::cholesky_jittered(&gamma, "Gamma~_GP")?;
        let misfit = 0.5 * linalg::mahalanobis_sq(&chol, &(&self.y_tilde - mean));
        let log_det = if self.log_det {
            0.5 * linalg::chol_logdet(&chol)
        } else {
            0.0
        };
        Ok(PhiTerms {
            misfit,
            log_det,
            prior: self.space.prior_penalty(theta),
        })
    }

    pub fn phi(&self, theta: &DVector<f64>) -> Result<f64> {
        if !self.in_support(theta) {
            return Ok(f64::INFINITY);
        }
        Ok(self.terms(theta)?.total())
    }
}

/// Phi_MCMC at `theta` for decorrelated data `y_tilde`.
pub fn phi_mcmc(
    theta: &DVector<f64>,
    y_tilde: &DVector<f64>,
    surrogate: &dyn Surrogate,
    noise: &NoiseModel,
    space: &ParameterSpace,
) -> Result<f64> {
    Posterior::new(surrogate, noise, space, y_tilde.clone())?.phi(theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_burn: usize,
    pub n_samples: usize,
    /// Initial proposal scale; proposals are N(0, step_scale^2 C).
    pub step_scale: f64,
    pub target_acceptance: f64,
    pub seed: u64,
    /// Burn-in proposals between step-size updates.
    pub adapt_interval: usize,
    /// kappa in log s += kappa (acceptance - target).
    pub adapt_rate: f64,
    pub min_step_scale: f64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            n_burn: 10_000,
            n_samples: 190_000,
            step_scale: 0.5,
            target_acceptance: 0.25,
            seed: 0,
            adapt_interval: 500,
            adapt_rate: 0.5,
            min_step_scale: 1e-6,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(CesError::InvalidInput(
                "n_samples must be at least 1".into(),
            ));
        }
        if !(self.step_scale > 0.0 && self.step_scale.is_finite()) {
            return Err(CesError::InvalidInput("step_scale must be positive".into()));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(CesError::InvalidInput(
                "target_acceptance must lie in (0, 1)".into(),
            ));
        }
        if self.adapt_interval == 0 {
            return Err(CesError::InvalidInput(
                "adapt_interval must be positive".into(),
            ));
        }
        if !(self.min_step_scale > 0.0 && self.min_step_scale <= self.step_scale) {
            return Err(CesError::InvalidInput(
                "min_step_scale must lie in (0, step_scale]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    /// Post-burn-in states.
    pub states: Vec<DVector<f64>>,
    /// -Phi at each state.
    pub log_posts: Vec<f64>,
    /// Whether the proposal leading to each state was accepted.
    pub accepted: Vec<bool>,
    /// Acceptances over burn-in and sampling together.
    pub accept_count: usize,
    pub tuned_step_scale: f64,
    /// (proposal index, step scale after the update, window acceptance).
    pub adaptation: Vec<(usize, f64, f64)>,
    /// Surrogate-backed Phi evaluations performed.
    pub evaluations: usize,
}

impl Chain {
    /// Acceptance rate over the frozen sampling phase.
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted.iter().filter(|&&a| a).count() as f64 / self.accepted.len() as f64
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[j]).collect()
    }
}

pub fn rwm_sample(
    config: &ChainConfig,
    posterior: &Posterior,
    start: &DVector<f64>,
) -> Result<Chain> {
    config.validate()?;
    let space = posterior.space();
    check_dim("chain start", space.dim(), start.len())?;
    let l = space.prior_cov_factor();
    let p = space.dim();
    let mut rng = seed::rng(config.seed);
    let mut theta = start.clone();
    let mut phi = posterior.phi(&theta)?;
    let mut evaluations = 1;
    let mut step = config.step_scale;
    let mut accept_count = 0;
    let mut window_accepts = 0;
    let mut adaptation = Vec::new();
    let total = config.n_burn + config.n_samples;
    let mut states = Vec::with_capacity(config.n_samples);
    let mut log_posts = Vec::with_capacity(config.n_samples);
    let mut accepted = Vec::with_capacity(config.n_samples);

    for i in 0..total {
        let z = DVector::from_iterator(p, (0..p).map(|_| StandardNormal.sample(&mut rng)));
        let proposal = &theta + &l * z * step;
        let phi_new = posterior.phi(&proposal)?;
        evaluations += 1;
        let u: f64 = rng.random();
        let accept = u.ln() < phi - phi_new;
        if accept {
            theta = proposal;
            phi = phi_new;
            accept_count += 1;
        }
        if i < config.n_burn {
            window_accepts += usize::from(accept);
            if (i + 1) % config.adapt_interval == 0 {
                let rate = window_accepts as f64 / config.adapt_interval as f64;
                if window_accepts == 0 && step <= config.min_step_scale {
                    return Err(CesError::SamplerStalled(format!(
                        "no proposal accepted in {} burn-in steps at the minimum step scale {}; \
                         the emulator and posterior are likely inconsistent",
                        config.adapt_interval, step
                    )));
                }
                step = (step * (config.adapt_rate * (rate - config.target_acceptance)).exp())
                    .max(config.min_step_scale);
                adaptation.push((i + 1, step, rate));
                debug!(proposal = i + 1, rate, step, "step-size update");
                window_accepts = 0;
            }
        } else {
            states.push(theta.clone());
            log_posts.push(-phi);
            accepted.push(accept);
        }
    }
    let chain = Chain {
        states,
        log_posts,
        accepted,
        accept_count,
        tuned_step_scale: step,
        adaptation,
        evaluations,
    };
    if chain.len() >= config.adapt_interval && chain.accepted.iter().all(|a| !a) {
        return Err(CesError::SamplerStalled(format!(
            "no proposal accepted in {} sampling steps at step scale {step}",
            chain.len()
        )));
    }
    info!(acceptance = chain.acceptance_rate(), step, "chain finished");
    Ok(chain)
}

/// Independent chains from a common start; chain `k` uses a seed derived
/// from `config.seed` and `k`.
pub fn rwm_chains(
    config: &ChainConfig,
    posterior: &Posterior,
    start: &DVector<f64>,
    n_chains: usize,
) -> Result<Vec<Chain>> {
    if n_chains == 0 {
        return Err(CesError::InvalidInput(
            "at least one chain is required".into(),
        ));
    }
    (0..n_chains as u64)
        .into_par_iter()
        .map(|k| {
            let cfg = ChainConfig {
                seed: seed::derive_seed(config.seed, &[k]),
                ..*config
            };
            rwm_sample(&cfg, posterior, start)
        })
        .collect()
}
