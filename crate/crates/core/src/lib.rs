//! Bayesian detection of differentially expressed genes from RNA-seq counts
//! with hidden Markov (or finite mixture) priors along each chromosome.
//!
//! The pipeline: [`ingest`] loads and normalizes counts, [`sampler`] runs one
//! MCMC chain per chromosome, [`detect`] turns the sampled DE states into an
//! FDR-controlled call set, [`modelsel`] chooses among the FF/FH/HF/HH
//! dependence structures by DIC, [`simulate`] generates benchmark data and
//! [`eval`] scores calls against ground truth.
//!
//! Numerical code is generic over [`Real`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar to `f64`, with `*32` variants for `f32`.

// `!(x > 0)` style checks are deliberate: they reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detect;
pub mod error;
pub mod eval;
pub mod hmm_core;
pub mod ingest;
pub mod modelsel;
pub mod sampler;
pub mod scalar;
pub mod simulate;

pub use error::{Error, Result};
pub use scalar::Real;

pub type ChainState = sampler::ChainState<f64>;
pub type ChainState32 = sampler::ChainState<f32>;
pub type ChainSamples = sampler::ChainSamples<f64>;
pub type ChainSamples32 = sampler::ChainSamples<f32>;
pub type SamplerConfig = sampler::SamplerConfig<f64>;
pub type SamplerConfig32 = sampler::SamplerConfig<f32>;
pub type StateModel = hmm_core::StateModel<f64>;
pub type StateModel32 = hmm_core::StateModel<f32>;
pub type ChromosomeBlock = ingest::ChromosomeBlock<f64>;
pub type ChromosomeBlock32 = ingest::ChromosomeBlock<f32>;
pub type PosteriorSummary = detect::PosteriorSummary<f64>;
pub type DetectionResult = detect::DetectionResult<f64>;
pub type DicReport = modelsel::DicReport<f64>;

pub use sampler::ModelChoice;
