//! Conditional DIC for the FF/FH/HF/HH family and selection by minimum DIC.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ChromosomeBlock;
use crate::sampler::{fit_blocks, ChainSamples, ModelChoice, SamplerConfig};
use crate::scalar::{ln_factorial, Real};

/// −2 Σ log Poisson(Y | λ) with log λ = β ∓ Δ + ε + ρ. `eps` is genes × subjects.
pub fn deviance<T: Real>(beta: &[T], delta: &[T], eps: Option<&[T]>, block: &ChromosomeBlock<T>) -> T {
    let mut ll = T::zero();
    for i in 0..block.n_genes() {
        for l in 0..block.n_libraries() {
            let e = match (eps, &block.subject) {
                (Some(e), Some(subj)) => e[i * block.n_subjects + subj[l]],
                _ => T::zero(),
            };
            let eta = beta[i] + block.sign(l) * delta[i] + e + block.rho[l];
            let y = block.count(i, l);
            ll = ll + T::from_count(y) * eta - eta.exp() - ln_factorial::<T>(y);
        }
    }
    -T::lit(2.0) * ll
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DicEntry<T> {
    pub d_bar: T,
    pub d_hat: T,
    pub p_d: T,
    pub dic: T,
}

impl<T: Real> DicEntry<T> {
    pub fn new(d_bar: T, d_hat: T) -> Self {
        let p_d = d_bar - d_hat;
        DicEntry { d_bar, d_hat, p_d, dic: d_bar + p_d }
    }

    /// Negative effective parameter counts point at poor mixing.
    pub fn mixing_flag(&self) -> bool {
        self.p_d < T::zero()
    }

    fn add(self, o: Self) -> Self {
        Self::new(self.d_bar + o.d_bar, self.d_hat + o.d_hat)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DicReport<T> {
    pub entries: BTreeMap<ModelChoice, DicEntry<T>>,
    pub selected: ModelChoice,
}

impl<T: Real> DicReport<T> {
    /// Picks the minimum DIC; exact ties go to the lowest label.
    pub fn from_entries(entries: BTreeMap<ModelChoice, DicEntry<T>>) -> Result<Self> {
        let mut best: Option<(ModelChoice, T)> = None;
        for (&m, e) in &entries {
            if !e.dic.is_finite() {
                return Err(Error::Model {
                    model: m.to_string(),
                    inner: Box::new(Error::Sampler("non-finite DIC".into())),
                });
            }
            if best.is_none_or(|(_, d)| e.dic < d) {
                best = Some((m, e.dic));
            }
        }
        let selected = best.ok_or_else(|| Error::ModelSel("no models to compare".into()))?.0;
        Ok(DicReport { entries, selected })
    }

    pub fn to_toml_string(&self) -> String {
        #[derive(Serialize)]
        struct Out {
            selected: String,
            models: BTreeMap<String, Row>,
        }
        #[derive(Serialize)]
        struct Row {
            d_bar: f64,
            d_hat: f64,
            p_d: f64,
            dic: f64,
            negative_p_d: bool,
        }
        let out = Out {
            selected: self.selected.to_string(),
            models: self
                .entries
                .iter()
                .map(|(m, e)| {
                    (
                        m.to_string(),
                        Row {
                            d_bar: e.d_bar.as_f64(),
                            d_hat: e.d_hat.as_f64(),
                            p_d: e.p_d.as_f64(),
                            dic: e.dic.as_f64(),
                            negative_p_d: e.mixing_flag(),
                        },
                    )
                })
                .collect(),
        };
        toml::to_string(&out).expect("DIC report serializes")
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct In {
            selected: ModelChoice,
            models: BTreeMap<String, DicEntry<f64>>,
        }
        let perr = |msg: String| Error::ModelSel(format!("report: {msg}"));
        let parsed: In = toml::from_str(s).map_err(|e| perr(e.to_string()))?;
        let mut entries = BTreeMap::new();
        for (m, e) in parsed.models {
            let m: ModelChoice = m.parse().map_err(|_| perr(format!("unknown model {m:?}")))?;
            entries.insert(m, DicEntry { d_bar: T::lit(e.d_bar), d_hat: T::lit(e.d_hat), p_d: T::lit(e.p_d), dic: T::lit(e.dic) });
        }
        Ok(DicReport { entries, selected: parsed.selected })
    }
}

/// D̄ and D(θ̄) of one chain against its block.
pub fn dic_from_samples<T: Real>(chain: &ChainSamples<T>, block: &ChromosomeBlock<T>) -> Result<DicEntry<T>> {
    if chain.n_samples() == 0 {
        return Err(Error::Sampler(format!("chromosome {} has no retained samples", chain.chromosome)));
    }
    if chain.n_genes() != block.n_genes() || chain.chromosome != block.chromosome {
        return Err(Error::Sampler("chain does not match block".into()));
    }
    let d_bar = chain.deviance.iter().copied().sum::<T>() / T::from_len(chain.n_samples());
    let eps = chain.posterior_mean_eps();
    let d_hat = deviance(&chain.posterior_mean_beta(), &chain.posterior_mean_delta(), eps.as_deref(), block);
    Ok(DicEntry::new(d_bar, d_hat))
}

/// Sums per-chromosome DIC components across a whole fit.
pub fn dic_over_blocks<T: Real>(chains: &[ChainSamples<T>], blocks: &[ChromosomeBlock<T>]) -> Result<DicEntry<T>> {
    if chains.len() != blocks.len() {
        return Err(Error::ModelSel("one chain per block required".into()));
    }
    let mut total = DicEntry::new(T::zero(), T::zero());
    for (c, b) in chains.iter().zip(blocks) {
        total = total.add(dic_from_samples(c, b)?);
    }
    Ok(total)
}

type Fits<T> = BTreeMap<ModelChoice, Vec<ChainSamples<T>>>;

/// Fits all four models in parallel and returns the report with every fit.
pub fn dic_select_with_chains<T: Real>(
    blocks: &[ChromosomeBlock<T>],
    cfg: &SamplerConfig<T>,
) -> Result<(DicReport<T>, Fits<T>)> {
    #[allow(clippy::type_complexity)]
    let fits: Vec<(ModelChoice, Result<(Vec<ChainSamples<T>>, DicEntry<T>)>)> = ModelChoice::ALL
        .par_iter()
        .map(|&m| {
            let r = fit_blocks(blocks, m, cfg).and_then(|c| {
                let e = dic_over_blocks(&c, blocks)?;
                Ok((c, e))
            });
            (m, r)
        })
        .collect();
    let mut entries = BTreeMap::new();
    let mut chains = BTreeMap::new();
    for (m, r) in fits {
        let (c, e) = r.map_err(|inner| Error::Model {
            model: m.to_string(),
            inner: Box::new(inner),
        })?;
        entries.insert(m, e);
        chains.insert(m, c);
    }
    Ok((DicReport::from_entries(entries)?, chains))
}

pub fn dic_select<T: Real>(blocks: &[ChromosomeBlock<T>], cfg: &SamplerConfig<T>) -> Result<DicReport<T>> {
    dic_select_with_chains(blocks, cfg).map(|(r, _)| r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{chain_rng, run_chain, Acceptance};
    use rand::{Rng, SeedableRng};
    use statrs::distribution::{Discrete, Poisson};

    fn block(counts: Vec<u64>, n_genes: usize, rho: Vec<f64>) -> ChromosomeBlock<f64> {
        let k = counts.len() / n_genes;
        let treatment = (0..k).map(|l| if l < k / 2 { 1 } else { 2 }).collect();
        ChromosomeBlock::new("1", counts, treatment, rho, None).unwrap()
    }

    #[test]
    fn zero_counts_unit_rate() {
        let b = block(vec![0; 12], 3, vec![0.0; 4]);
        let d = deviance(&[0.0; 3], &[0.0; 3], None, &b);
        assert!((d - 24.0).abs() < 1e-12);
    }

    #[test]
    fn saturated_is_minimal() {
        let b = block(vec![5, 5, 9, 9], 1, vec![0.0; 4]);
        // λ = Y per cell: β = (ln5+ln9)/2, Δ = (ln9-ln5)/2
        let (bt, dl) = ((5f64.ln() + 9f64.ln()) / 2.0, (9f64.ln() - 5f64.ln()) / 2.0);
        let best = deviance(&[bt], &[dl], None, &b);
        for db in [-0.1, -0.01, 0.01, 0.1] {
            assert!(deviance(&[bt + db], &[dl], None, &b) > best);
            assert!(deviance(&[bt], &[dl + db], None, &b) > best);
        }
    }

    #[test]
    fn matches_pmf_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (n, k) = (7, 6);
        let counts: Vec<u64> = (0..n * k).map(|_| rng.random_range(0..40)).collect();
        let rho: Vec<f64> = (0..k).map(|_| rng.random_range(-0.3..0.3)).collect();
        let beta: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let delta: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = block(counts.clone(), n, rho.clone());
        let mut oracle = 0.0;
        for i in 0..n {
            for l in 0..k {
                let s = if l < k / 2 { -1.0 } else { 1.0 };
                let lam = (beta[i] + s * delta[i] + rho[l]).exp();
                oracle += Poisson::new(lam).unwrap().ln_pmf(counts[i * k + l]);
            }
        }
        assert!((deviance(&beta, &delta, None, &b) + 2.0 * oracle).abs() < 1e-9);
    }

    #[test]
    fn single_sample_has_zero_pd() {
        let b = block(vec![3, 4, 8, 9, 1, 0, 2, 1], 2, vec![0.0; 4]);
        let beta = vec![1.2, 0.1];
        let delta = vec![0.4, -0.2];
        let ch = ChainSamples {
            model: ModelChoice::FF,
            chromosome: "1".into(),
            gene_ids: b.gene_ids.clone(),
            positions: b.positions.clone(),
            iterations: vec![1],
            h: vec![3, 1],
            s: vec![2, 1],
            beta: beta.clone(),
            delta: delta.clone(),
            eps: None,
            n_subjects: 0,
            hyper: vec![],
            deviance: vec![deviance(&beta, &delta, None, &b)],
            loglik: vec![],
            acceptance: Acceptance::default(),
        };
        let e = dic_from_samples(&ch, &b).unwrap();
        assert!(e.p_d.abs() < 1e-12);
        assert!((e.dic - e.d_bar).abs() < 1e-12);
    }

    #[test]
    fn chain_deviance_matches_recomputation() {
        let b = block(vec![3, 4, 8, 9, 1, 0, 2, 1, 20, 22, 25, 30], 3, vec![0.1, -0.1, 0.05, -0.05]);
        let cfg = SamplerConfig { iterations: 200, burn_in: 100, thin: 5, ..Default::default() };
        let ch = run_chain(&b, ModelChoice::HH, &cfg, &mut chain_rng(1, "1")).unwrap();
        let n = ch.n_genes();
        for k in 0..ch.n_samples() {
            let d = deviance(&ch.beta[k * n..(k + 1) * n], &ch.delta[k * n..(k + 1) * n], None, &b);
            assert!((d - ch.deviance[k]).abs() < 1e-9 * d.abs().max(1.0));
        }
        let e = dic_from_samples(&ch, &b).unwrap();
        assert!((e.dic - (2.0 * e.d_bar - e.d_hat)).abs() < 1e-9);
    }

    #[test]
    fn selection_ties_and_serialization() {
        let mut entries = BTreeMap::new();
        entries.insert(ModelChoice::HH, DicEntry::new(10.0, 8.0));
        entries.insert(ModelChoice::FH, DicEntry::new(10.0, 8.0));
        entries.insert(ModelChoice::FF, DicEntry::new(11.0, 8.0));
        let r = DicReport::from_entries(entries).unwrap();
        assert_eq!(r.selected, ModelChoice::FH);
        let back = DicReport::<f64>::from_toml_str(&r.to_toml_string()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn select_runs_all_models() {
        let b = block(vec![3, 4, 8, 9, 1, 0, 2, 1, 20, 22, 25, 30], 3, vec![0.0; 4]);
        let cfg = SamplerConfig { iterations: 60, burn_in: 30, thin: 3, ..Default::default() };
        let r = dic_select(&[b], &cfg).unwrap();
        assert_eq!(r.entries.len(), 4);
        for e in r.entries.values() {
            assert!((e.dic - (2.0 * e.d_bar - e.d_hat)).abs() < 1e-9);
        }
    }
}
