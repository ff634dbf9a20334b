//! MCMC engine: Laplace-approximation Metropolis–Hastings updates of the
//! per-gene effects and their latent states, subject random effects for
//! paired designs, and Gibbs updates of the hyperparameters.

mod chain;
mod hyper;
mod io;
mod kernels;
mod sigma_eps;
pub mod truncnorm;
mod working;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm_core::{StateKind, StateModel, StateSequence};
use crate::ingest::ChromosomeBlock;
use crate::scalar::Real;

pub use chain::{chain_rng, fit_blocks, initialize, run_chain, run_chain_from, Acceptance, ChainSamples, Hyper};
pub use hyper::{update_mu_pair, update_variance_hyperparams};
pub use io::{read_samples_tsv, write_samples_tsv, SampleTable};
pub use kernels::{mh_accept, mh_update_site, update_subject_effects, SiteTarget};
pub use sigma_eps::estimate_sigma_eps;
pub use working::{
    collapse_sufficient, log_state_emission_likelihood, state_emission_likelihood,
    working_decomposition, CollapsedSite, Target, WorkingSite,
};

/// Upper bound u₁ = −(log 2)/2 for the under-expression mean φ₁.
pub fn phi_upper<T: Real>() -> T {
    -T::lit(std::f64::consts::LN_2 / 2.0)
}

/// Lower bound l₃ = (log 2)/2 for the over-expression mean φ₃.
pub fn phi_lower<T: Real>() -> T {
    T::lit(std::f64::consts::LN_2 / 2.0)
}

/// (β-process, Δ-process) pair: F = finite mixture, H = hidden Markov.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelChoice {
    FF,
    FH,
    HF,
    HH,
}

impl ModelChoice {
    pub const ALL: [ModelChoice; 4] = [ModelChoice::FF, ModelChoice::FH, ModelChoice::HF, ModelChoice::HH];

    pub fn beta_kind(self) -> StateKind {
        match self {
            ModelChoice::FF | ModelChoice::FH => StateKind::Fmm,
            ModelChoice::HF | ModelChoice::HH => StateKind::Hmm,
        }
    }

    pub fn delta_kind(self) -> StateKind {
        match self {
            ModelChoice::FF | ModelChoice::HF => StateKind::Fmm,
            ModelChoice::FH | ModelChoice::HH => StateKind::Hmm,
        }
    }
}

impl fmt::Display for ModelChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for ModelChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FF" => Ok(ModelChoice::FF),
            "FH" => Ok(ModelChoice::FH),
            "HF" => Ok(ModelChoice::HF),
            "HH" => Ok(ModelChoice::HH),
            other => Err(Error::Sampler(format!("unknown model {other:?}"))),
        }
    }
}

/// Parameter groups that can be held at their initial values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Clamp {
    pub beta: bool,
    pub delta: bool,
    pub hyper: bool,
    pub state_models: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig<T> {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Minimum separation δ between μ₁ and μ₂.
    pub delta_sep: T,
    /// Inverse-gamma shape of the τ² prior, per Δ-state.
    pub tau2_shape: [T; 3],
    /// Inverse-gamma scale of the τ² prior, per Δ-state.
    pub tau2_scale: [T; 3],
    /// Subject random-effect variance (paired designs); fixed during the chain.
    pub sigma_eps2: T,
    /// Dirichlet concentration for every cell of the state laws.
    pub dirichlet_alpha: T,
    pub seed: u64,
    pub clamp: Clamp,
}

impl<T: Real> Default for SamplerConfig<T> {
    fn default() -> Self {
        SamplerConfig {
            iterations: 100_000,
            burn_in: 50_000,
            thin: 10,
            delta_sep: T::lit(0.5),
            tau2_shape: [T::lit(2.0); 3],
            tau2_scale: [T::lit(0.05); 3],
            sigma_eps2: T::zero(),
            dirichlet_alpha: T::one(),
            seed: 0,
            clamp: Clamp::default(),
        }
    }
}

impl<T: Real> SamplerConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.burn_in >= self.iterations {
            return Err(Error::Sampler(format!(
                "burn-in ({}) must be below iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::Sampler("thinning must be at least 1".into()));
        }
        if !(self.delta_sep > T::zero()) {
            return Err(Error::Sampler("delta_sep must be positive".into()));
        }
        if self.tau2_shape.iter().chain(&self.tau2_scale).any(|&x| !(x > T::zero())) {
            return Err(Error::Sampler("tau2 prior parameters must be positive".into()));
        }
        if !(self.sigma_eps2 >= T::zero()) {
            return Err(Error::Sampler("sigma_eps2 must be non-negative".into()));
        }
        if !(self.dirichlet_alpha > T::zero()) {
            return Err(Error::Sampler("dirichlet_alpha must be positive".into()));
        }
        Ok(())
    }
}

/// One MCMC configuration for a chromosome.
///
/// The β-state emissions hold (μ_u, σ_u²); the Δ-state emissions hold
/// (φ₁, τ₁²), (0, τ₂²), (φ₃, τ₃²).
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState<T> {
    pub beta: Vec<T>,
    pub delta: Vec<T>,
    pub s: StateSequence,
    pub h: StateSequence,
    /// Row-major genes × subjects; `None` for unpaired data.
    pub eps: Option<Vec<T>>,
    pub beta_model: StateModel<T>,
    pub delta_model: StateModel<T>,
}

impl<T: Real> ChainState<T> {
    pub fn n_genes(&self) -> usize {
        self.beta.len()
    }

    pub fn mu(&self) -> (T, T) {
        let e = &self.beta_model.emissions;
        (e[0].mean, e[1].mean)
    }

    pub fn sigma2(&self) -> (T, T) {
        let e = &self.beta_model.emissions;
        (e[0].var, e[1].var)
    }

    pub fn phi(&self) -> (T, T) {
        let e = &self.delta_model.emissions;
        (e[0].mean, e[2].mean)
    }

    pub fn tau2(&self) -> (T, T, T) {
        let e = &self.delta_model.emissions;
        (e[0].var, e[1].var, e[2].var)
    }

    #[inline]
    pub fn eps_at(&self, gene: usize, block: &ChromosomeBlock<T>, library: usize) -> T {
        match (&self.eps, &block.subject) {
            (Some(eps), Some(subj)) => eps[gene * block.n_subjects + subj[library]],
            _ => T::zero(),
        }
    }

    /// log λ for one cell under the paired or unpaired log-linear model.
    #[inline]
    pub fn log_lambda(&self, block: &ChromosomeBlock<T>, gene: usize, library: usize) -> T {
        self.beta[gene] + block.sign(library) * self.delta[gene] + self.eps_at(gene, block, library) + block.rho[library]
    }

    /// Checks the ordering, truncation and positivity constraints.
    pub fn check_invariants(&self, delta_sep: T) -> Result<()> {
        let (mu1, mu2) = self.mu();
        // tolerance for the exact-boundary case μ₂ − μ₁ = δ
        let slack = T::epsilon() * T::lit(64.0) * (T::one() + mu2.abs());
        if mu2 - mu1 < delta_sep - slack {
            return Err(Error::Sampler(format!(
                "mu ordering violated: mu1={mu1}, mu2={mu2}, delta={delta_sep}"
            )));
        }
        let (phi1, phi3) = self.phi();
        if !(phi1 <= phi_upper::<T>()) || !(phi3 >= phi_lower::<T>()) {
            return Err(Error::Sampler(format!("phi bounds violated: phi1={phi1}, phi3={phi3}")));
        }
        if self.delta_model.emissions[1].mean != T::zero() {
            return Err(Error::Sampler("null-state mean must be 0".into()));
        }
        let vars = self
            .beta_model
            .emissions
            .iter()
            .chain(&self.delta_model.emissions)
            .map(|e| e.var);
        for v in vars {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::Sampler(format!("non-positive variance {v}")));
            }
        }
        Ok(())
    }
}
