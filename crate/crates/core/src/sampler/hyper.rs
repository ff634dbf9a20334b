//! Gibbs steps for the hyperparameters: the ordered pair (μ₁, μ₂) under
//! the separation constraint, the state variances and the DE-state means.

use rand::Rng;

use crate::scalar::Real;

use super::truncnorm::{normal_above, normal_below};
use super::{phi_lower, phi_upper, ChainState, SamplerConfig};

/// Count and sum of `values` over sites whose state is `t`.
fn state_moments<T: Real>(states: &[u8], values: &[T], t: usize) -> (usize, T) {
    states
        .iter()
        .zip(values)
        .filter(|(&s, _)| s as usize == t)
        .fold((0, T::zero()), |(n, s), (_, &v)| (n + 1, s + v))
}

fn sum_sq_dev<T: Real>(states: &[u8], values: &[T], t: usize, center: T) -> T {
    states
        .iter()
        .zip(values)
        .filter(|(&s, _)| s as usize == t)
        .map(|(_, &v)| (v - center) * (v - center))
        .sum()
}

fn inverse_gamma<T: Real, R: Rng + ?Sized>(shape: T, scale: T, rng: &mut R) -> T {
    scale / T::std_gamma(shape, rng)
}

/// Draws (μ₁, μ₂) from the product of the per-state normal full conditionals
/// restricted to μ₂ − μ₁ ≥ δ.
///
/// The gap d = μ₂ − μ₁ is drawn from its truncated marginal and μ₁ from its
/// (unconstrained) normal conditional given d. An empty state has a flat
/// conditional: its mean is kept and only the other mean is redrawn under
/// the constraint.
pub fn update_mu_pair<T: Real, R: Rng + ?Sized>(state: &mut ChainState<T>, cfg: &SamplerConfig<T>, rng: &mut R) {
    let (n1, sum1) = state_moments(&state.s.0, &state.beta, 0);
    let (n2, sum2) = state_moments(&state.s.0, &state.beta, 1);
    let (s1, s2) = state.sigma2();
    let (mu1, mu2) = state.mu();
    let delta = cfg.delta_sep;
    let (new1, new2) = match (n1, n2) {
        (0, 0) => (mu1, mu2),
        (0, _) => {
            let m2 = sum2 / T::from_len(n2);
            (mu1, normal_above(m2, s2 / T::from_len(n2), mu1 + delta, rng))
        }
        (_, 0) => {
            let m1 = sum1 / T::from_len(n1);
            (normal_below(m1, s1 / T::from_len(n1), mu2 - delta, rng), mu2)
        }
        _ => {
            let (m1, v1) = (sum1 / T::from_len(n1), s1 / T::from_len(n1));
            let (m2, v2) = (sum2 / T::from_len(n2), s2 / T::from_len(n2));
            let vd = v1 + v2;
            let d = normal_above(m2 - m1, vd, delta, rng);
            let cond_mean = m1 - v1 / vd * (d - (m2 - m1));
            let cond_var = v1 * v2 / vd;
            let a = cond_mean + cond_var.sqrt() * T::std_normal(rng);
            (a, a + d)
        }
    };
    state.beta_model.emissions[0].mean = new1;
    state.beta_model.emissions[1].mean = new2;
}

/// Gibbs draws of σ₁², σ₂², φ₁, φ₃ and τ₁², τ₂², τ₃² (in that order).
///
/// σ_u² ~ InvGamma(n_u/2, SS_u/2) under p(σ²) ∝ 1/σ², skipped when state u is
/// empty. φ₁ and φ₃ are normal full conditionals truncated to (−∞, u₁] and
/// [l₃, ∞), kept when their state is empty. τ_t² ~ InvGamma(a + n_t/2,
/// b + SS_t/2) around the state center (φ₁, 0, φ₃).
pub fn update_variance_hyperparams<T: Real, R: Rng + ?Sized>(
    state: &mut ChainState<T>,
    cfg: &SamplerConfig<T>,
    rng: &mut R,
) {
    let half = T::lit(0.5);
    let tiny = T::min_positive_value().sqrt();
    for u in 0..2 {
        let n = state.s.0.iter().filter(|&&s| s as usize == u).count();
        if n == 0 {
            continue;
        }
        let ss = sum_sq_dev(&state.s.0, &state.beta, u, state.beta_model.emissions[u].mean);
        let draw = inverse_gamma(half * T::from_len(n), (half * ss).max(tiny), rng);
        state.beta_model.emissions[u].var = draw.max(tiny);
    }

    for (t, bound_above) in [(0usize, false), (2usize, true)] {
        let (n, sum) = state_moments(&state.h.0, &state.delta, t);
        if n == 0 {
            continue;
        }
        let mean = sum / T::from_len(n);
        let var = state.delta_model.emissions[t].var / T::from_len(n);
        state.delta_model.emissions[t].mean = if bound_above {
            normal_above(mean, var, phi_lower(), rng)
        } else {
            normal_below(mean, var, phi_upper(), rng)
        };
    }

    for t in 0..3 {
        let n = state.h.0.iter().filter(|&&h| h as usize == t).count();
        let center = state.delta_model.emissions[t].mean;
        let ss = sum_sq_dev(&state.h.0, &state.delta, t, center);
        let shape = cfg.tau2_shape[t] + half * T::from_len(n);
        let scale = cfg.tau2_scale[t] + half * ss;
        state.delta_model.emissions[t].var = inverse_gamma(shape, scale, rng).max(tiny);
    }
}
