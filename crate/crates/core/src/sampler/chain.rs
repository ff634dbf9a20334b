//! The per-chromosome MCMC run: initialization, the five-step sweep and
//! collection of thinned samples with diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hmm_core::{update_state_model_params, Emission, StateKind, StateModel, StateSequence};
use crate::ingest::ChromosomeBlock;
use crate::scalar::{ln_factorial, Real};

use super::hyper::{update_mu_pair, update_variance_hyperparams};
use super::kernels::{site_update, subject_sweep, Scratch, SiteTarget};
use super::{phi_lower, phi_upper, ChainState, ModelChoice, SamplerConfig};

/// Hyperparameter snapshot of one retained iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper<T> {
    pub mu: (T, T),
    pub sigma2: (T, T),
    pub phi: (T, T),
    pub tau2: (T, T, T),
}

impl<T: Real> Hyper<T> {
    fn of(state: &ChainState<T>) -> Self {
        Hyper {
            mu: state.mu(),
            sigma2: state.sigma2(),
            phi: state.phi(),
            tau2: state.tau2(),
        }
    }
}

/// Per-iteration acceptance fractions of each sweep.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Acceptance<T> {
    pub delta: Vec<T>,
    pub beta: Vec<T>,
    /// Empty unless subject effects were sampled.
    pub eps: Vec<T>,
}

fn mean_of<T: Real>(v: &[T]) -> Option<T> {
    (!v.is_empty()).then(|| v.iter().copied().sum::<T>() / T::from_len(v.len()))
}

impl<T: Real> Acceptance<T> {
    pub fn mean_delta(&self) -> Option<T> {
        mean_of(&self.delta)
    }

    pub fn mean_beta(&self) -> Option<T> {
        mean_of(&self.beta)
    }

    pub fn mean_eps(&self) -> Option<T> {
        mean_of(&self.eps)
    }
}

/// Retained draws of one chain. Per-gene arrays are row-major
/// (sample × gene); state columns hold 1-based labels.
#[derive(Debug, Clone)]
pub struct ChainSamples<T> {
    pub model: ModelChoice,
    pub chromosome: String,
    pub gene_ids: Vec<String>,
    pub positions: Vec<i64>,
    /// 1-based iteration number of each retained sample.
    pub iterations: Vec<usize>,
    pub h: Vec<u8>,
    pub s: Vec<u8>,
    pub beta: Vec<T>,
    pub delta: Vec<T>,
    /// sample × gene × subject, paired runs only.
    pub eps: Option<Vec<T>>,
    pub n_subjects: usize,
    pub hyper: Vec<Hyper<T>>,
    /// Poisson deviance of each retained sample.
    pub deviance: Vec<T>,
    /// Poisson log-likelihood after every iteration, burn-in included.
    pub loglik: Vec<T>,
    pub acceptance: Acceptance<T>,
}

impl<T: Real> ChainSamples<T> {
    pub fn n_samples(&self) -> usize {
        self.iterations.len()
    }

    pub fn n_genes(&self) -> usize {
        self.gene_ids.len()
    }

    pub fn h_column(&self, gene: usize) -> impl Iterator<Item = u8> + '_ {
        let n = self.n_genes();
        (0..self.n_samples()).map(move |k| self.h[k * n + gene])
    }

    fn column_mean(&self, values: &[T], gene: usize) -> T {
        let n = self.n_genes();
        (0..self.n_samples()).map(|k| values[k * n + gene]).sum::<T>() / T::from_len(self.n_samples())
    }

    pub fn posterior_mean_beta(&self) -> Vec<T> {
        (0..self.n_genes()).map(|g| self.column_mean(&self.beta, g)).collect()
    }

    pub fn posterior_mean_delta(&self) -> Vec<T> {
        (0..self.n_genes()).map(|g| self.column_mean(&self.delta, g)).collect()
    }

    /// Posterior mean of ε as genes × subjects.
    pub fn posterior_mean_eps(&self) -> Option<Vec<T>> {
        let eps = self.eps.as_ref()?;
        let width = self.n_genes() * self.n_subjects;
        let mut out = vec![T::zero(); width];
        for k in 0..self.n_samples() {
            for (o, &e) in out.iter_mut().zip(&eps[k * width..(k + 1) * width]) {
                *o = *o + e;
            }
        }
        let n = T::from_len(self.n_samples());
        out.iter_mut().for_each(|o| *o = *o / n);
        Some(out)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Per-chromosome RNG stream: seed ⊕ hash(chromosome id).
pub fn chain_rng(seed: u64, chromosome: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(chromosome.as_bytes()))
}

/// Split of sorted 1-D values minimizing the within-group sum of squares;
/// returns the threshold (midpoint between the two groups).
fn two_means_split<T: Real>(values: &[T]) -> Option<T> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if v.len() < 2 || v[0] == v[v.len() - 1] {
        return None;
    }
    let total: T = v.iter().copied().sum();
    let total_sq: T = v.iter().map(|&x| x * x).sum();
    let (mut left, mut left_sq) = (T::zero(), T::zero());
    let mut best: Option<(T, usize)> = None;
    for k in 1..v.len() {
        left = left + v[k - 1];
        left_sq = left_sq + v[k - 1] * v[k - 1];
        if v[k] == v[k - 1] {
            continue;
        }
        let (nl, nr) = (T::from_len(k), T::from_len(v.len() - k));
        let right = total - left;
        let ss = (left_sq - left * left / nl) + (total_sq - left_sq - right * right / nr);
        if best.is_none_or(|(b, _)| ss < b) {
            best = Some((ss, k));
        }
    }
    best.map(|(_, k)| (v[k - 1] + v[k]) / T::lit(2.0))
}

fn moments<T: Real>(vals: impl Iterator<Item = T>) -> (usize, T, T) {
    let v: Vec<T> = vals.collect();
    let n = v.len();
    if n == 0 {
        return (0, T::zero(), T::zero());
    }
    let mean = v.iter().copied().sum::<T>() / T::from_len(n);
    let var = if n > 1 {
        v.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / T::from_len(n - 1)
    } else {
        T::zero()
    };
    (n, mean, var)
}

fn initial_law<T: Real>(kind: StateKind, seq: &StateSequence, m: usize, alpha: T, emissions: Vec<Emission<T>>) -> Result<StateModel<T>> {
    match kind {
        StateKind::Fmm => {
            let counts = seq.counts(m);
            let total = T::from_len(seq.len()) + alpha * T::from_len(m);
            let w = counts.iter().map(|&c| (T::from_len(c) + alpha) / total).collect();
            StateModel::fmm(w, emissions)
        }
        StateKind::Hmm => {
            let mut counts = vec![0usize; m * m];
            for w in seq.0.windows(2) {
                counts[w[0] as usize * m + w[1] as usize] += 1;
            }
            let mut trans = Vec::with_capacity(m * m);
            for row in counts.chunks(m) {
                let total = T::from_len(row.iter().sum()) + alpha * T::from_len(m);
                trans.extend(row.iter().map(|&c| (T::from_len(c) + alpha) / total));
            }
            StateModel::hmm(trans, emissions)
        }
    }
}

/// Data-driven starting point of a chain.
///
/// β from log(1 + mean count) − mean ρ; Δ from half the log-ratio of the
/// offset-corrected treatment means with a 0.5 continuity correction; s by
/// the optimal two-group split of β; h by thresholding Δ at ±(log 2)/2;
/// hyperparameters and state laws from the induced within-state moments.
pub fn initialize<T: Real>(block: &ChromosomeBlock<T>, choice: ModelChoice, cfg: &SamplerConfig<T>) -> Result<ChainState<T>> {
    let n = block.n_genes();
    if n == 0 {
        return Err(Error::Sampler(format!("chromosome {} has no genes", block.chromosome)));
    }
    let libs = block.n_libraries();
    let n_t1 = block.treatment.iter().filter(|&&t| t == 1).count();
    if n_t1 == 0 || n_t1 == libs {
        return Err(Error::Sampler("both treatments need at least one library".into()));
    }
    let half = T::lit(0.5);
    let mean_rho = block.rho.iter().copied().sum::<T>() / T::from_len(libs);
    let mut beta = Vec::with_capacity(n);
    let mut delta = Vec::with_capacity(n);
    for i in 0..n {
        let row = block.row(i);
        let mean = T::from_count(row.iter().sum()) / T::from_len(libs);
        beta.push((T::one() + mean).ln() - mean_rho);
        let (mut a, mut b) = (T::zero(), T::zero());
        for (l, &y) in row.iter().enumerate() {
            let v = T::from_count(y) / block.rho[l].exp();
            if block.treatment[l] == 1 {
                a = a + v;
            } else {
                b = b + v;
            }
        }
        a = a / T::from_len(n_t1);
        b = b / T::from_len(libs - n_t1);
        delta.push(half * ((b + half) / (a + half)).ln());
    }

    let split = two_means_split(&beta);
    let s = StateSequence(
        beta.iter()
            .map(|&b| match split {
                Some(c) if b < c => 0,
                _ => 1,
            })
            .collect(),
    );
    let h = StateSequence(
        delta
            .iter()
            .map(|&d| {
                if d < phi_upper() {
                    0
                } else if d > phi_lower() {
                    2
                } else {
                    1
                }
            })
            .collect(),
    );

    let sd_floor = T::lit(0.05);
    let (n1, mut mu1, v1) = moments(beta.iter().zip(&s.0).filter(|(_, &t)| t == 0).map(|(&b, _)| b));
    let (n2, mut mu2, v2) = moments(beta.iter().zip(&s.0).filter(|(_, &t)| t == 1).map(|(&b, _)| b));
    if n1 == 0 {
        mu1 = mu2 - T::lit(2.0);
    }
    if n2 == 0 {
        mu2 = mu1 + T::lit(2.0);
    }
    if mu2 - mu1 < cfg.delta_sep {
        let mid = (mu1 + mu2) * half;
        mu1 = mid - cfg.delta_sep * half;
        mu2 = mu1 + cfg.delta_sep;
    }
    let sig = |nu: usize, v: T| if nu > 1 { v.max(sd_floor) } else { T::one() };
    let beta_em = vec![Emission::new(mu1, sig(n1, v1)), Emission::new(mu2, sig(n2, v2))];

    let mut delta_em = Vec::with_capacity(3);
    for t in 0..3 {
        let (nt, mean, var) = moments(delta.iter().zip(&h.0).filter(|(_, &x)| x as usize == t).map(|(&d, _)| d));
        let center = match t {
            0 if nt > 0 => mean.min(phi_upper::<T>() - sd_floor),
            0 => phi_upper::<T>() - T::lit(0.1),
            2 if nt > 0 => mean.max(phi_lower::<T>() + sd_floor),
            2 => phi_lower::<T>() + T::lit(0.1),
            _ => T::zero(),
        };
        let prior_mean = if cfg.tau2_shape[t] > T::one() {
            cfg.tau2_scale[t] / (cfg.tau2_shape[t] - T::one())
        } else {
            cfg.tau2_scale[t]
        };
        let tau2 = if nt > 1 { var.max(T::lit(1e-3)) } else { prior_mean };
        delta_em.push(Emission::new(center, tau2));
    }

    let beta_model = initial_law(choice.beta_kind(), &s, 2, cfg.dirichlet_alpha, beta_em)?;
    let delta_model = initial_law(choice.delta_kind(), &h, 3, cfg.dirichlet_alpha, delta_em)?;
    let eps = block.is_paired().then(|| vec![T::zero(); n * block.n_subjects]);
    Ok(ChainState {
        beta,
        delta,
        s,
        h,
        eps,
        beta_model,
        delta_model,
    })
}

/// Full Poisson log-likelihood of the block; on a non-finite value returns
/// the index of the first offending gene.
fn block_loglik<T: Real>(state: &ChainState<T>, block: &ChromosomeBlock<T>, const_term: T) -> std::result::Result<T, usize> {
    let mut total = -const_term;
    for i in 0..block.n_genes() {
        let mut g = T::zero();
        for l in 0..block.n_libraries() {
            let eta = state.log_lambda(block, i, l);
            g = g + T::from_count(block.count(i, l)) * eta - eta.exp();
        }
        if !g.is_finite() {
            return Err(i);
        }
        total = total + g;
    }
    Ok(total)
}

pub fn run_chain<T: Real, R: Rng + ?Sized>(
    block: &ChromosomeBlock<T>,
    choice: ModelChoice,
    cfg: &SamplerConfig<T>,
    rng: &mut R,
) -> Result<ChainSamples<T>> {
    cfg.validate()?;
    let init = initialize(block, choice, cfg)?;
    run_chain_from(block, choice, cfg, init, rng)
}

/// Runs the sampler from a given starting state.
///
/// Each iteration: (1) joint (h_i, Δ_i) updates in gene order, (2) joint
/// (s_i, β_i) updates, (3) subject effects when paired and σ²_ε > 0,
/// (4) (μ₁, μ₂), (5) σ², φ, τ² and the Dirichlet draws of the state laws.
/// Groups flagged in `cfg.clamp` are skipped.
pub fn run_chain_from<T: Real, R: Rng + ?Sized>(
    block: &ChromosomeBlock<T>,
    choice: ModelChoice,
    cfg: &SamplerConfig<T>,
    mut state: ChainState<T>,
    rng: &mut R,
) -> Result<ChainSamples<T>> {
    cfg.validate()?;
    let n = block.n_genes();
    if n == 0 || state.n_genes() != n {
        return Err(Error::Sampler("state does not match block".into()));
    }
    state.check_invariants(cfg.delta_sep)?;
    let with_eps = block.is_paired() && cfg.sigma_eps2 > T::zero();
    if with_eps && state.eps.is_none() {
        state.eps = Some(vec![T::zero(); n * block.n_subjects]);
    }
    let const_term: T = block.counts.iter().map(|&y| ln_factorial::<T>(y)).sum();
    let alpha2 = [cfg.dirichlet_alpha; 2];
    let alpha3 = [cfg.dirichlet_alpha; 3];

    let n_keep = (cfg.iterations - cfg.burn_in).div_ceil(cfg.thin);
    let mut out = ChainSamples {
        model: choice,
        chromosome: block.chromosome.clone(),
        gene_ids: block.gene_ids.clone(),
        positions: block.positions.clone(),
        iterations: Vec::with_capacity(n_keep),
        h: Vec::with_capacity(n_keep * n),
        s: Vec::with_capacity(n_keep * n),
        beta: Vec::with_capacity(n_keep * n),
        delta: Vec::with_capacity(n_keep * n),
        eps: with_eps.then(|| Vec::with_capacity(n_keep * n * block.n_subjects)),
        n_subjects: if with_eps { block.n_subjects } else { 0 },
        hyper: Vec::with_capacity(n_keep),
        deviance: Vec::with_capacity(n_keep),
        loglik: Vec::with_capacity(cfg.iterations),
        acceptance: Acceptance::default(),
    };
    let mut scratch = Scratch::new();
    let n_f = T::from_len(n);

    for it in 1..=cfg.iterations {
        if !cfg.clamp.delta {
            let acc = (0..n)
                .filter(|&i| site_update(SiteTarget::Delta, i, &mut state, block, &mut scratch, rng))
                .count();
            out.acceptance.delta.push(T::from_len(acc) / n_f);
        }
        if !cfg.clamp.beta {
            let acc = (0..n)
                .filter(|&i| site_update(SiteTarget::Beta, i, &mut state, block, &mut scratch, rng))
                .count();
            out.acceptance.beta.push(T::from_len(acc) / n_f);
        }
        if with_eps {
            let acc = subject_sweep(&mut state, block, cfg, &mut scratch, rng)?;
            out.acceptance.eps.push(T::from_len(acc) / T::from_len(n * block.n_subjects));
        }
        if !cfg.clamp.hyper {
            update_mu_pair(&mut state, cfg, rng);
            update_variance_hyperparams(&mut state, cfg, rng);
        }
        if !cfg.clamp.state_models {
            state.beta_model = update_state_model_params(&state.s, &state.beta_model, &alpha2, rng);
            state.delta_model = update_state_model_params(&state.h, &state.delta_model, &alpha3, rng);
        }
        state
            .check_invariants(cfg.delta_sep)
            .map_err(|e| Error::Sampler(format!("iteration {it}: {e}")))?;

        let ll = block_loglik(&state, block, const_term).map_err(|g| Error::NonFinite {
            iteration: it,
            gene: block.gene_ids[g].clone(),
        })?;
        out.loglik.push(ll);

        if it > cfg.burn_in && (it - cfg.burn_in - 1).is_multiple_of(cfg.thin) {
            out.iterations.push(it);
            out.h.extend(state.h.0.iter().map(|&t| t + 1));
            out.s.extend(state.s.0.iter().map(|&t| t + 1));
            out.beta.extend_from_slice(&state.beta);
            out.delta.extend_from_slice(&state.delta);
            if let (Some(dst), Some(src)) = (out.eps.as_mut(), state.eps.as_ref()) {
                dst.extend_from_slice(src);
            }
            out.hyper.push(Hyper::of(&state));
            out.deviance.push(-T::lit(2.0) * ll);
        }
    }
    Ok(out)
}

/// Runs one chain per block in parallel on the current rayon pool, each
/// with its own [`chain_rng`] stream.
pub fn fit_blocks<T: Real>(
    blocks: &[ChromosomeBlock<T>],
    choice: ModelChoice,
    cfg: &SamplerConfig<T>,
) -> Result<Vec<ChainSamples<T>>> {
    blocks
        .par_iter()
        .map(|b| {
            let mut rng = chain_rng(cfg.seed, &b.chromosome);
            run_chain(b, choice, cfg, &mut rng)
        })
        .collect()
}
