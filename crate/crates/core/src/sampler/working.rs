//! Working values of the Poisson counts under a Laplace approximation and
//! their collapse to a single sufficient statistic per site.

use crate::hmm_core::StateModel;
use crate::ingest::ChromosomeBlock;
use crate::scalar::{normal_ln_pdf, Real};

use super::ChainState;

/// Parameter whose observations are linearized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Beta(usize),
    Delta(usize),
    /// (gene, subject)
    Eps(usize, usize),
}

/// Per-observation linearization: log λ = ξ + z·θ around θ_old.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingSite<T> {
    pub y: Vec<u64>,
    pub xi: Vec<T>,
    pub z: Vec<T>,
    pub lambda_star: Vec<T>,
    pub w: Vec<T>,
}

/// Sufficient collapse w* of a site and its precision Σ z²λ*.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollapsedSite<T> {
    pub w_star: T,
    pub precision: T,
}

/// Observations touching one parameter, as (y, ξ, z) triples.
#[derive(Debug, Clone, Default)]
pub(crate) struct SiteObs<T> {
    pub y: Vec<u64>,
    pub xi: Vec<T>,
    pub z: Vec<T>,
}

impl<T: Real> SiteObs<T> {
    pub fn clear(&mut self) {
        self.y.clear();
        self.xi.clear();
        self.z.clear();
    }

    pub fn push(&mut self, y: u64, xi: T, z: T) {
        self.y.push(y);
        self.xi.push(xi);
        self.z.push(z);
    }

    /// Fills the observations of `target` given every other parameter in `state`.
    pub fn fill(&mut self, target: Target, state: &ChainState<T>, block: &ChromosomeBlock<T>) {
        self.clear();
        match target {
            Target::Delta(i) => {
                for l in 0..block.n_libraries() {
                    let xi = state.beta[i] + state.eps_at(i, block, l) + block.rho[l];
                    self.push(block.count(i, l), xi, block.sign(l));
                }
            }
            Target::Beta(i) => {
                for l in 0..block.n_libraries() {
                    let xi = block.sign(l) * state.delta[i] + state.eps_at(i, block, l) + block.rho[l];
                    self.push(block.count(i, l), xi, T::one());
                }
            }
            Target::Eps(i, k) => {
                let subj = block.subject.as_ref().expect("subject effects need a paired block");
                for l in (0..block.n_libraries()).filter(|&l| subj[l] == k) {
                    let xi = state.beta[i] + block.sign(l) * state.delta[i] + block.rho[l];
                    self.push(block.count(i, l), xi, T::one());
                }
            }
        }
    }
}

/// Laplace expansion of a site at θ, together with the exact Poisson
/// log-likelihood at θ (without the −log y! constant).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Laplace<T> {
    pub collapsed: CollapsedSite<T>,
    pub loglik: T,
}

pub(crate) fn laplace_at<T: Real>(obs: &SiteObs<T>, theta: T) -> Laplace<T> {
    let mut num = T::zero();
    let mut prec = T::zero();
    let mut loglik = T::zero();
    for ((&y, &xi), &z) in obs.y.iter().zip(&obs.xi).zip(&obs.z) {
        let eta = xi + z * theta;
        let lam = eta.exp();
        let yf = T::from_count(y);
        // λ*·z·(w − ξ) with w = η + (y − λ*)/λ*
        num = num + lam * z * z * theta + z * (yf - lam);
        prec = prec + z * z * lam;
        loglik = loglik + yf * eta - lam;
    }
    Laplace {
        collapsed: CollapsedSite {
            w_star: num / prec,
            precision: prec,
        },
        loglik,
    }
}

/// Linearizes the observations of `target` around its current value.
pub fn working_decomposition<T: Real>(
    target: Target,
    state: &ChainState<T>,
    block: &ChromosomeBlock<T>,
) -> WorkingSite<T> {
    let mut obs = SiteObs::default();
    obs.fill(target, state, block);
    let theta_old = match target {
        Target::Beta(i) => state.beta[i],
        Target::Delta(i) => state.delta[i],
        Target::Eps(i, k) => state.eps.as_ref().expect("paired state")[i * block.n_subjects + k],
    };
    let lambda_star: Vec<T> = obs
        .xi
        .iter()
        .zip(&obs.z)
        .map(|(&xi, &z)| (xi + z * theta_old).exp())
        .collect();
    let w = obs
        .y
        .iter()
        .zip(&lambda_star)
        .map(|(&y, &lam)| lam.ln() + (T::from_count(y) - lam) / lam)
        .collect();
    WorkingSite {
        y: obs.y,
        xi: obs.xi,
        z: obs.z,
        lambda_star,
        w,
    }
}

/// w* = Σ λ*z(w − ξ) / Σ z²λ*, precision = Σ z²λ*.
pub fn collapse_sufficient<T: Real>(site: &WorkingSite<T>) -> CollapsedSite<T> {
    assert!(!site.w.is_empty(), "collapse needs at least one observation");
    let mut num = T::zero();
    let mut prec = T::zero();
    for (((&w, &xi), &z), &lam) in site.w.iter().zip(&site.xi).zip(&site.z).zip(&site.lambda_star) {
        num = num + lam * z * (w - xi);
        prec = prec + z * z * lam;
    }
    CollapsedSite {
        w_star: num / prec,
        precision: prec,
    }
}

/// Log of `state_emission_likelihood`.
pub fn log_state_emission_likelihood<T: Real>(cs: &CollapsedSite<T>, model: &StateModel<T>) -> Vec<T> {
    model
        .emissions
        .iter()
        .map(|e| normal_ln_pdf(cs.w_star, e.mean, e.var + T::one() / cs.precision))
        .collect()
}

/// Density of w* under each latent state with θ integrated out:
/// Normal(ν_t, κ_t² + 1/precision).
pub fn state_emission_likelihood<T: Real>(cs: &CollapsedSite<T>, model: &StateModel<T>) -> Vec<T> {
    log_state_emission_likelihood(cs, model)
        .into_iter()
        .map(T::exp)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm_core::{Emission, StateModel, StateSequence};
    use proptest::prelude::*;

    fn site(y: &[u64], xi: &[f64], z: &[f64], theta: f64) -> WorkingSite<f64> {
        let lambda_star: Vec<f64> = xi.iter().zip(z).map(|(x, z)| (x + z * theta).exp()).collect();
        let w = y
            .iter()
            .zip(&lambda_star)
            .map(|(&y, &l)| l.ln() + (y as f64 - l) / l)
            .collect();
        WorkingSite {
            y: y.to_vec(),
            xi: xi.to_vec(),
            z: z.to_vec(),
            lambda_star,
            w,
        }
    }

    /// Root of the weighted least-squares score Σ λ z (w − ξ − zθ) by bisection.
    fn wls_by_bisection(s: &WorkingSite<f64>) -> f64 {
        let score = |t: f64| -> f64 {
            (0..s.w.len())
                .map(|l| s.lambda_star[l] * s.z[l] * (s.w[l] - s.xi[l] - s.z[l] * t))
                .sum()
        };
        let (mut lo, mut hi) = (-1e7, 1e7);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if score(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn tiny_state(beta: f64, delta: f64) -> (ChainState<f64>, ChromosomeBlock<f64>) {
        let block = ChromosomeBlock::new("1", vec![3, 5], vec![1, 2], vec![0.0, 0.0], None).unwrap();
        let bm = StateModel::fmm(
            vec![0.5, 0.5],
            vec![Emission::new(1.0, 0.37), Emission::new(3.91, 2.4)],
        )
        .unwrap();
        let dm = StateModel::fmm(
            vec![0.22, 0.56, 0.22],
            vec![Emission::new(-0.4, 0.013), Emission::new(0.0, 0.01), Emission::new(0.4, 0.013)],
        )
        .unwrap();
        let st = ChainState {
            beta: vec![beta],
            delta: vec![delta],
            s: StateSequence(vec![0]),
            h: StateSequence(vec![1]),
            eps: None,
            beta_model: bm,
            delta_model: dm,
        };
        (st, block)
    }

    #[test]
    fn residual_vanishes_when_y_equals_lambda() {
        let s = site(&[20], &[20f64.ln()], &[1.0], 0.0);
        assert!((s.w[0] - 20f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_count_working_value() {
        let s = site(&[0], &[2f64.ln()], &[1.0], 0.0);
        assert!((s.w[0] - (2f64.ln() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn delta_target_lambda_star() {
        let (st, block) = tiny_state(1.0, 0.4);
        let ws = working_decomposition(Target::Delta(0), &st, &block);
        assert_eq!(ws.z, vec![-1.0, 1.0]);
        assert!((ws.lambda_star[0] - 0.6f64.exp()).abs() < 1e-12);
        assert!((ws.lambda_star[1] - 1.4f64.exp()).abs() < 1e-12);
        let wb = working_decomposition(Target::Beta(0), &st, &block);
        assert_eq!(wb.xi, vec![-0.4, 0.4]);
        assert_eq!(wb.lambda_star, ws.lambda_star);
    }

    #[test]
    fn collapse_degenerate_cases() {
        let s = site(&[7], &[0.0], &[1.0], 1.5);
        let c = collapse_sufficient(&s);
        assert!((c.w_star - s.w[0]).abs() < 1e-14);
        assert!((c.precision - s.lambda_star[0]).abs() < 1e-14);

        let s = site(&[4, 9], &[0.3, 0.3], &[1.0, 1.0], 1.0);
        let c = collapse_sufficient(&s);
        let mean = ((s.w[0] - 0.3) + (s.w[1] - 0.3)) / 2.0;
        assert!((c.w_star - mean).abs() < 1e-14);
    }

    #[test]
    fn collapse_matches_laplace_helper() {
        let (st, block) = tiny_state(1.2, -0.3);
        let ws = working_decomposition(Target::Delta(0), &st, &block);
        let mut obs = SiteObs::default();
        obs.fill(Target::Delta(0), &st, &block);
        let lap = laplace_at(&obs, -0.3);
        let c = collapse_sufficient(&ws);
        assert!((lap.collapsed.w_star - c.w_star).abs() < 1e-12);
        assert!((lap.collapsed.precision - c.precision).abs() < 1e-12);
    }

    #[test]
    fn emission_likelihood_examples() {
        let model = StateModel::fmm(
            vec![0.22, 0.56, 0.22],
            vec![Emission::new(-0.4, 0.013), Emission::new(0.0, 0.01), Emission::new(0.4, 0.013)],
        )
        .unwrap();
        let d = state_emission_likelihood(&CollapsedSite { w_star: 0.0, precision: 100.0 }, &model);
        assert!(d[1] > d[0] && d[1] > d[2]);
        // direct evaluation: N(0; 0, 0.02) and N(0; 0.4, 0.023)
        let n = |x: f64, m: f64, v: f64| (-(x - m).powi(2) / (2.0 * v)).exp() / (std::f64::consts::TAU * v).sqrt();
        assert!((d[1] - n(0.0, 0.0, 0.02)).abs() < 1e-12);
        assert!((d[2] - n(0.0, 0.4, 0.023)).abs() < 1e-12);

        let tight = model.with_emissions(vec![Emission::new(0.0, 1e-300); 3]);
        let d = state_emission_likelihood(&CollapsedSite { w_star: 0.1, precision: 4.0 }, &tight);
        assert!((d[0] - n(0.1, 0.0, 0.25)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn working_value_identity(y in 0u64..100_000, eta in -8.0f64..12.0) {
            let s = site(&[y], &[eta], &[1.0], 0.0);
            let lam = s.lambda_star[0];
            let lhs = s.w[0] - lam.ln();
            let rhs = (y as f64 - lam) / lam;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }

        #[test]
        fn collapse_equals_wls(ys in proptest::collection::vec(0u64..500, 1..12),
                               xis in proptest::collection::vec(-2.0f64..4.0, 12),
                               signs in proptest::collection::vec(any::<bool>(), 12),
                               theta in -1.5f64..1.5) {
            let n = ys.len();
            let z: Vec<f64> = signs[..n].iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
            let s = site(&ys, &xis[..n], &z, theta);
            let c = collapse_sufficient(&s);
            let oracle = wls_by_bisection(&s);
            prop_assert!((c.w_star - oracle).abs() < 1e-10 * (1.0 + oracle.abs()), "{} vs {}", c.w_star, oracle);
            let p: f64 = s.lambda_star.iter().sum();
            prop_assert!((c.precision - p).abs() <= 1e-12 * p);
        }
    }
}
