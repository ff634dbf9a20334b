//! Latent state machinery shared by the 2-state expression process and the
//! 3-state differential process: finite mixtures, stationary HMMs, single-site
//! conditional priors and Dirichlet–multinomial parameter updates.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StateKind {
    /// Independent states drawn from a probability vector.
    Fmm,
    /// Stationary first-order Markov chain along the chromosome.
    Hmm,
}

/// Normal emission of one latent state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Emission<T> {
    pub mean: T,
    pub var: T,
}

impl<T> Emission<T> {
    pub fn new(mean: T, var: T) -> Self {
        Emission { mean, var }
    }
}

/// Prior law of a latent state sequence plus per-state normal emissions.
///
/// For an HMM, `weights` caches the stationary distribution of `trans`, which
/// is also the law of the first state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateModel<T> {
    kind: StateKind,
    weights: Vec<T>,
    trans: Vec<T>,
    pub emissions: Vec<Emission<T>>,
}

fn tol<T: Real>() -> T {
    // f32 cannot hold 1e-12 of slack after a handful of additions
    T::lit(1e-12).max(T::epsilon() * T::lit(16.0))
}

impl<T: Real> StateModel<T> {
    pub fn fmm(weights: Vec<T>, emissions: Vec<Emission<T>>) -> Result<Self> {
        let m = weights.len();
        check_prob_vector(&weights, "weights")?;
        check_emissions(&emissions, m)?;
        let trans = (0..m).flat_map(|_| weights.iter().copied()).collect();
        Ok(StateModel {
            kind: StateKind::Fmm,
            weights,
            trans,
            emissions,
        })
    }

    /// `trans` is row-major m×m.
    pub fn hmm(trans: Vec<T>, emissions: Vec<Emission<T>>) -> Result<Self> {
        let m = emissions.len();
        if trans.len() != m * m {
            return Err(Error::Hmm(format!(
                "transition matrix has {} entries, expected {m}x{m}",
                trans.len()
            )));
        }
        for row in trans.chunks(m) {
            check_prob_vector(row, "transition row")?;
        }
        check_emissions(&emissions, m)?;
        let weights = stationary_distribution(&trans, m)?;
        Ok(StateModel {
            kind: StateKind::Hmm,
            weights,
            trans,
            emissions,
        })
    }

    pub fn kind(&self) -> StateKind {
        self.kind
    }

    pub fn m(&self) -> usize {
        self.weights.len()
    }

    /// Mixture weights (FMM) or stationary distribution (HMM).
    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// Row-major transition matrix. For an FMM every row equals the weights.
    pub fn trans(&self) -> &[T] {
        &self.trans
    }

    #[inline]
    pub fn a(&self, from: usize, to: usize) -> T {
        self.trans[from * self.m() + to]
    }

    /// Same state law with different emissions.
    pub fn with_emissions(&self, emissions: Vec<Emission<T>>) -> Self {
        assert_eq!(emissions.len(), self.m());
        StateModel {
            emissions,
            ..self.clone()
        }
    }
}

fn check_prob_vector<T: Real>(p: &[T], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Hmm(format!("{what} is empty")));
    }
    if p.iter().any(|&x| !(x >= T::zero()) || !x.is_finite()) {
        return Err(Error::Hmm(format!("{what} has a negative or non-finite entry")));
    }
    let s: T = p.iter().copied().sum();
    if (s - T::one()).abs() > tol::<T>() * T::from_len(p.len()) {
        return Err(Error::Hmm(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

fn check_emissions<T: Real>(e: &[Emission<T>], m: usize) -> Result<()> {
    if e.len() != m {
        return Err(Error::Hmm(format!("{} emissions for {m} states", e.len())));
    }
    if e.iter().any(|x| !(x.var > T::zero())) {
        return Err(Error::Hmm("emission variances must be positive".into()));
    }
    Ok(())
}

/// Latent states of one chromosome, 0-based (state `t` carries label `t + 1`).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StateSequence(pub Vec<u8>);

impl StateSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> usize {
        self.0[i] as usize
    }

    #[inline]
    pub fn set(&mut self, i: usize, t: usize) {
        self.0[i] = t as u8;
    }

    pub fn counts(&self, m: usize) -> Vec<usize> {
        let mut c = vec![0; m];
        for &t in &self.0 {
            c[t as usize] += 1;
        }
        c
    }
}

/// True when some power `trans^k`, `k ≤ m²`, is entrywise positive.
fn is_primitive<T: Real>(trans: &[T], m: usize) -> bool {
    let pattern: Vec<bool> = trans.iter().map(|&x| x > T::zero()).collect();
    let mut power = pattern.clone();
    for _ in 0..m * m {
        if power.iter().all(|&b| b) {
            return true;
        }
        let mut next = vec![false; m * m];
        for i in 0..m {
            for j in 0..m {
                next[i * m + j] = (0..m).any(|k| power[i * m + k] && pattern[k * m + j]);
            }
        }
        power = next;
    }
    power.iter().all(|&b| b)
}

/// Stationary law π of an irreducible aperiodic row-stochastic matrix,
/// from the linear system πᵀ(A − I) = 0, Σπ = 1.
pub fn stationary_distribution<T: Real>(trans: &[T], m: usize) -> Result<Vec<T>> {
    if m == 0 || trans.len() != m * m {
        return Err(Error::Hmm("transition matrix must be square and nonempty".into()));
    }
    if !is_primitive(trans, m) {
        return Err(Error::Hmm("transition matrix is reducible or periodic".into()));
    }
    // Row r of the system is column r of (A − I); the last row is replaced
    // by the normalization constraint.
    let mut a = vec![T::zero(); m * (m + 1)];
    for r in 0..m {
        for c in 0..m {
            a[r * (m + 1) + c] = if r == m - 1 {
                T::one()
            } else {
                trans[c * m + r] - if r == c { T::one() } else { T::zero() }
            };
        }
        a[r * (m + 1) + m] = if r == m - 1 { T::one() } else { T::zero() };
    }
    let pi = solve_augmented(&mut a, m)
        .ok_or_else(|| Error::Hmm("singular stationary system".into()))?;
    Ok(pi.into_iter().map(|p| p.max(T::zero())).collect())
}

/// Gaussian elimination with partial pivoting on an n×(n+1) augmented matrix.
fn solve_augmented<T: Real>(a: &mut [T], n: usize) -> Option<Vec<T>> {
    let w = n + 1;
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| {
            a[x * w + col]
                .abs()
                .partial_cmp(&a[y * w + col].abs())
                .unwrap()
        })?;
        if a[pivot * w + col].abs() <= T::epsilon() {
            return None;
        }
        if pivot != col {
            for k in 0..w {
                a.swap(col * w + k, pivot * w + k);
            }
        }
        for r in col + 1..n {
            let f = a[r * w + col] / a[col * w + col];
            for k in col..w {
                a[r * w + k] = a[r * w + k] - f * a[col * w + k];
            }
        }
    }
    let mut x = vec![T::zero(); n];
    for r in (0..n).rev() {
        let mut s = a[r * w + n];
        for k in r + 1..n {
            s = s - a[r * w + k] * x[k];
        }
        x[r] = s / a[r * w + r];
    }
    Some(x)
}

/// Writes P(state_i = t | all other states) into `out`.
pub fn conditional_state_prior_into<T: Real>(
    seq: &StateSequence,
    i: usize,
    model: &StateModel<T>,
    out: &mut [T],
) {
    let m = model.m();
    debug_assert!(i < seq.len() && out.len() == m);
    if model.kind == StateKind::Fmm {
        out.copy_from_slice(&model.weights);
        return;
    }
    let n = seq.len();
    for (t, o) in out.iter_mut().enumerate() {
        let left = if i == 0 {
            model.weights[t]
        } else {
            model.a(seq.get(i - 1), t)
        };
        let right = if i + 1 < n {
            model.a(t, seq.get(i + 1))
        } else {
            T::one()
        };
        *o = left * right;
    }
    let total: T = out.iter().copied().sum();
    if total > T::zero() {
        out.iter_mut().for_each(|o| *o = *o / total);
    } else {
        out.iter_mut().for_each(|o| *o = T::one() / T::from_len(m));
    }
}

pub fn conditional_state_prior<T: Real>(seq: &StateSequence, i: usize, model: &StateModel<T>) -> Vec<T> {
    let mut out = vec![T::zero(); model.m()];
    conditional_state_prior_into(seq, i, model, &mut out);
    out
}

/// Log prior probability of a whole state sequence.
pub fn log_joint_states<T: Real>(seq: &StateSequence, model: &StateModel<T>) -> T {
    match model.kind {
        StateKind::Fmm => seq.0.iter().map(|&t| model.weights[t as usize].ln()).sum(),
        StateKind::Hmm => {
            if seq.is_empty() {
                return T::zero();
            }
            let head = model.weights[seq.get(0)].ln();
            head + seq
                .0
                .windows(2)
                .map(|w| model.a(w[0] as usize, w[1] as usize).ln())
                .sum::<T>()
        }
    }
}

/// Draws from a Dirichlet via normalized gamma variates.
pub fn sample_dirichlet<T: Real, R: Rng + ?Sized>(alpha: &[T], rng: &mut R) -> Vec<T> {
    let floor = T::min_positive_value();
    let mut g: Vec<T> = alpha.iter().map(|&a| T::std_gamma(a, rng).max(floor)).collect();
    let s: T = g.iter().copied().sum();
    g.iter_mut().for_each(|x| *x = *x / s);
    g
}

/// Conjugate Gibbs draw of the state law given the current sequence.
///
/// FMM weights ~ Dirichlet(α + state counts); each HMM row v ~
/// Dirichlet(α + transition counts out of v). Emissions are kept.
pub fn update_state_model_params<T: Real, R: Rng + ?Sized>(
    seq: &StateSequence,
    model: &StateModel<T>,
    alpha: &[T],
    rng: &mut R,
) -> StateModel<T> {
    let m = model.m();
    assert_eq!(alpha.len(), m, "one concentration per state");
    match model.kind {
        StateKind::Fmm => {
            let counts = seq.counts(m);
            let post: Vec<T> = alpha
                .iter()
                .zip(&counts)
                .map(|(&a, &c)| a + T::from_len(c))
                .collect();
            let weights = sample_dirichlet(&post, rng);
            let trans = (0..m).flat_map(|_| weights.iter().copied()).collect();
            StateModel {
                kind: StateKind::Fmm,
                weights,
                trans,
                emissions: model.emissions.clone(),
            }
        }
        StateKind::Hmm => {
            let mut counts = vec![0usize; m * m];
            for w in seq.0.windows(2) {
                counts[w[0] as usize * m + w[1] as usize] += 1;
            }
            let mut trans = Vec::with_capacity(m * m);
            for v in 0..m {
                let post: Vec<T> = (0..m)
                    .map(|t| alpha[t] + T::from_len(counts[v * m + t]))
                    .collect();
                trans.extend(sample_dirichlet(&post, rng));
            }
            match stationary_distribution(&trans, m) {
                Ok(weights) => StateModel {
                    kind: StateKind::Hmm,
                    weights,
                    trans,
                    emissions: model.emissions.clone(),
                },
                // only reachable when a draw underflows to exact zeros
                Err(_) => model.clone(),
            }
        }
    }
}
