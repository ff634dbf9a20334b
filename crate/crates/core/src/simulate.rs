//! Ground-truth datasets: latent β and Δ processes, Poisson or
//! negative-binomial counts, optional paired subject effects.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm_core::{Emission, StateKind, StateModel, StateSequence};
use crate::ingest::{CountMatrix, GeneMeta, LibraryMeta};
use crate::sampler::{chain_rng, ModelChoice};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Noise {
    Poisson,
    /// Per-gene dispersion ζ ~ Gamma(shape, scale).
    NegBinomial { shape: f64, scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSpec {
    pub chromosomes: usize,
    pub genes_per_chromosome: usize,
    /// Libraries per treatment.
    pub replicates: usize,
    /// Generating processes for (β, Δ).
    pub model: ModelChoice,
    pub mu: [f64; 2],
    pub sigma2: [f64; 2],
    /// Row-major 2 × 2.
    pub beta_trans: [f64; 4],
    pub beta_weights: [f64; 2],
    /// (φ₁, φ₃).
    pub phi: [f64; 2],
    pub tau2: [f64; 3],
    /// Row-major 3 × 3.
    pub delta_trans: [f64; 9],
    pub delta_weights: [f64; 3],
    /// One offset per library (treatment 1 first); zeros when absent.
    pub rho: Option<Vec<f64>>,
    pub noise: Noise,
    /// Variance of paired subject effects; 0 gives unpaired data.
    pub sigma_eps2: f64,
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        SimSpec::full()
    }
}

impl SimSpec {
    /// 12 chromosomes × 800 genes, 6 + 6 replicates.
    pub fn full() -> Self {
        SimSpec {
            chromosomes: 12,
            genes_per_chromosome: 800,
            replicates: 6,
            model: ModelChoice::HH,
            mu: [1.0, 3.91],
            sigma2: [0.37, 2.4],
            beta_trans: [0.50, 0.50, 0.05, 0.95],
            beta_weights: [0.1, 0.9],
            phi: [-0.4, 0.4],
            tau2: [0.013, 0.01, 0.013],
            delta_trans: [0.50, 0.25, 0.25, 0.10, 0.80, 0.10, 0.25, 0.25, 0.50],
            delta_weights: [0.22, 0.56, 0.22],
            rho: None,
            noise: Noise::Poisson,
            sigma_eps2: 0.0,
            seed: 1,
        }
    }

    /// 2 chromosomes × 200 genes, 6 + 6 replicates.
    pub fn desk() -> Self {
        SimSpec {
            chromosomes: 2,
            genes_per_chromosome: 200,
            ..SimSpec::full()
        }
    }

    pub fn n_libraries(&self) -> usize {
        2 * self.replicates
    }

    pub fn rho(&self) -> Vec<f64> {
        self.rho.clone().unwrap_or_else(|| vec![0.0; self.n_libraries()])
    }

    pub fn beta_model(&self) -> Result<StateModel<f64>> {
        let em = vec![Emission::new(self.mu[0], self.sigma2[0]), Emission::new(self.mu[1], self.sigma2[1])];
        match self.model.beta_kind() {
            StateKind::Fmm => StateModel::fmm(self.beta_weights.to_vec(), em),
            StateKind::Hmm => StateModel::hmm(self.beta_trans.to_vec(), em),
        }
    }

    pub fn delta_model(&self) -> Result<StateModel<f64>> {
        let em = vec![
            Emission::new(self.phi[0], self.tau2[0]),
            Emission::new(0.0, self.tau2[1]),
            Emission::new(self.phi[1], self.tau2[2]),
        ];
        match self.model.delta_kind() {
            StateKind::Fmm => StateModel::fmm(self.delta_weights.to_vec(), em),
            StateKind::Hmm => StateModel::hmm(self.delta_trans.to_vec(), em),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Simulate(m.into()));
        if self.chromosomes == 0 || self.genes_per_chromosome == 0 || self.replicates == 0 {
            return bad("chromosomes, genes per chromosome and replicates must be at least 1");
        }
        if let Some(r) = &self.rho {
            if r.len() != self.n_libraries() || r.iter().any(|x| !x.is_finite()) {
                return bad("rho needs one finite value per library");
            }
        }
        if let Noise::NegBinomial { shape, scale } = self.noise {
            if !(shape > 0.0 && scale > 0.0) {
                return bad("gamma dispersion parameters must be positive");
            }
        }
        if !(self.sigma_eps2 >= 0.0) {
            return bad("sigma_eps2 must be non-negative");
        }
        self.beta_model().map_err(|e| Error::Simulate(format!("beta law: {e}")))?;
        self.delta_model().map_err(|e| Error::Simulate(format!("delta law: {e}")))?;
        Ok(())
    }
}

/// Per-gene ground truth, in the row order of the generated matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub gene_ids: Vec<String>,
    /// 1-based labels.
    pub s: Vec<u8>,
    pub h: Vec<u8>,
    pub beta: Vec<f64>,
    pub delta: Vec<f64>,
    pub zeta: Option<Vec<f64>>,
    pub de: Vec<bool>,
}

fn categorical<T: Real, R: Rng + ?Sized>(p: &[T], rng: &mut R) -> usize {
    let u = T::open01(rng);
    let mut acc = T::zero();
    for (t, &x) in p.iter().enumerate() {
        acc = acc + x;
        if u < acc {
            return t;
        }
    }
    p.len() - 1
}

/// FMM: i.i.d. from the weights. HMM: first state from the stationary law,
/// then Markov transitions.
pub fn simulate_states<T: Real, R: Rng + ?Sized>(model: &StateModel<T>, n: usize, rng: &mut R) -> StateSequence {
    let m = model.m();
    let mut seq = Vec::with_capacity(n);
    let mut row = vec![T::zero(); m];
    for i in 0..n {
        let t = match (model.kind(), i) {
            (StateKind::Hmm, i) if i > 0 => {
                let prev = seq[i - 1] as usize;
                row.iter_mut().enumerate().for_each(|(j, r)| *r = model.a(prev, j));
                categorical(&row, rng)
            }
            _ => categorical(model.weights(), rng),
        };
        seq.push(t as u8);
    }
    StateSequence(seq)
}

/// One negative-binomial count with mean `lambda` and dispersion `zeta`
/// (variance λ + ζλ²), drawn as a Poisson–Gamma mixture.
pub fn negbin_draw<R: Rng + ?Sized>(lambda: f64, zeta: f64, rng: &mut R) -> u64 {
    let rate = if zeta > 0.0 {
        let r = 1.0 / zeta;
        lambda * Gamma::new(r, 1.0 / r).expect("positive shape").sample(rng)
    } else {
        lambda
    };
    poisson_draw(rate, rng)
}

pub fn poisson_draw<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).expect("finite positive rate").sample(rng) as u64
}

struct ChromOut {
    counts: Vec<u64>,
    s: Vec<u8>,
    h: Vec<u8>,
    beta: Vec<f64>,
    delta: Vec<f64>,
    zeta: Vec<f64>,
}

fn chromosome_name(c: usize) -> String {
    format!("chr{}", c + 1)
}

// keeps simulation streams distinct from chains fitted with the same seed
const SIM_SALT: u64 = 0x5eed_da7a_0000_0001;

fn simulate_chromosome(spec: &SimSpec, beta_model: &StateModel<f64>, delta_model: &StateModel<f64>, rho: &[f64], rng: &mut ChaCha8Rng) -> ChromOut {
    let n = spec.genes_per_chromosome;
    let k = spec.n_libraries();
    let s = simulate_states(beta_model, n, rng);
    let h = simulate_states(delta_model, n, rng);
    let draw = |em: &Emission<f64>, rng: &mut ChaCha8Rng| Normal::new(em.mean, em.var.sqrt()).expect("valid normal").sample(rng);
    let beta: Vec<f64> = (0..n).map(|i| draw(&beta_model.emissions[s.get(i)], rng)).collect();
    let delta: Vec<f64> = (0..n).map(|i| draw(&delta_model.emissions[h.get(i)], rng)).collect();
    let zeta: Vec<f64> = match spec.noise {
        Noise::Poisson => Vec::new(),
        Noise::NegBinomial { shape, scale } => {
            let g = Gamma::new(shape, scale).expect("validated gamma");
            (0..n).map(|_| g.sample(rng)).collect()
        }
    };
    let eps_sd = spec.sigma_eps2.sqrt();
    let mut counts = Vec::with_capacity(n * k);
    let mut eps = vec![0.0; spec.replicates];
    for i in 0..n {
        if spec.sigma_eps2 > 0.0 {
            eps.iter_mut().for_each(|e| *e = eps_sd * f64::std_normal(rng));
        }
        for l in 0..k {
            let sign = if l < spec.replicates { -1.0 } else { 1.0 };
            let lambda = (beta[i] + sign * delta[i] + eps[l % spec.replicates] + rho[l]).exp();
            counts.push(match spec.noise {
                Noise::Poisson => poisson_draw(lambda, rng),
                Noise::NegBinomial { .. } => negbin_draw(lambda, zeta[i], rng),
            });
        }
    }
    ChromOut {
        counts,
        s: s.0.iter().map(|t| t + 1).collect(),
        h: h.0.iter().map(|t| t + 1).collect(),
        beta,
        delta,
        zeta,
    }
}

fn simulate_dataset(spec: &SimSpec) -> Result<(CountMatrix, SimTruth)> {
    spec.validate()?;
    let beta_model = spec.beta_model()?;
    let delta_model = spec.delta_model()?;
    let rho = spec.rho();
    let chroms: Vec<ChromOut> = (0..spec.chromosomes)
        .into_par_iter()
        .map(|c| {
            let mut rng = chain_rng(spec.seed ^ SIM_SALT, &chromosome_name(c));
            simulate_chromosome(spec, &beta_model, &delta_model, &rho, &mut rng)
        })
        .collect();

    let paired = spec.sigma_eps2 > 0.0;
    let libraries: Vec<LibraryMeta> = (0..spec.n_libraries())
        .map(|l| {
            let (treatment, rep) = ((l / spec.replicates) as u8 + 1, (l % spec.replicates) as u32 + 1);
            LibraryMeta {
                name: format!("t{treatment}_r{rep}"),
                treatment,
                replicate: rep,
                subject: paired.then_some(rep),
            }
        })
        .collect();
    let mut genes = Vec::new();
    let mut counts = Vec::new();
    let nb = matches!(spec.noise, Noise::NegBinomial { .. });
    let mut truth = SimTruth {
        gene_ids: Vec::new(),
        s: Vec::new(),
        h: Vec::new(),
        beta: Vec::new(),
        delta: Vec::new(),
        zeta: nb.then(Vec::new),
        de: Vec::new(),
    };
    for (c, out) in chroms.into_iter().enumerate() {
        let chrom = chromosome_name(c);
        for i in 0..spec.genes_per_chromosome {
            let id = format!("{chrom}_g{:04}", i + 1);
            truth.gene_ids.push(id.clone());
            genes.push(GeneMeta {
                id,
                chromosome: chrom.clone(),
                position: (i as i64 + 1) * 1000,
            });
        }
        counts.extend(out.counts);
        truth.de.extend(out.h.iter().map(|&h| h != 2));
        truth.s.extend(out.s);
        truth.h.extend(out.h);
        truth.beta.extend(out.beta);
        truth.delta.extend(out.delta);
        if let Some(z) = truth.zeta.as_mut() {
            z.extend(out.zeta);
        }
    }
    Ok((CountMatrix::new(genes, libraries, counts)?, truth))
}

pub fn simulate_poisson_dataset(spec: &SimSpec) -> Result<(CountMatrix, SimTruth)> {
    if spec.noise != Noise::Poisson {
        return Err(Error::Simulate("spec noise is not Poisson".into()));
    }
    simulate_dataset(spec)
}

pub fn simulate_negbin_dataset(spec: &SimSpec) -> Result<(CountMatrix, SimTruth)> {
    if !matches!(spec.noise, Noise::NegBinomial { .. }) {
        return Err(Error::Simulate("spec noise is not negative binomial".into()));
    }
    simulate_dataset(spec)
}

/// Dispatches on `spec.noise`.
pub fn simulate(spec: &SimSpec) -> Result<(CountMatrix, SimTruth)> {
    simulate_dataset(spec)
}

/// Method-of-moments gamma fit: shape = mean²/var, scale = var/mean.
pub fn fit_dispersion_gamma(dispersions: &[f64]) -> Result<(f64, f64)> {
    if dispersions.len() < 2 {
        return Err(Error::Simulate("at least two dispersions are needed".into()));
    }
    if dispersions.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::Simulate("dispersions must be positive and finite".into()));
    }
    let n = dispersions.len() as f64;
    let mean = dispersions.iter().sum::<f64>() / n;
    let var = dispersions.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if !(var > 0.0) || dispersions.iter().all(|&d| d == dispersions[0]) {
        return Err(Error::Simulate("dispersions have zero variance; gamma is degenerate".into()));
    }
    Ok((mean * mean / var, var / mean))
}

const TRUTH_HEADER: &str = "gene_id\ts\th\tbeta\tdelta\tzeta\tde";

pub fn write_truth_tsv<W: Write>(mut out: W, truth: &SimTruth, comments: &[String]) -> std::io::Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "{TRUTH_HEADER}")?;
    for i in 0..truth.gene_ids.len() {
        let zeta = truth.zeta.as_ref().map_or("NA".to_string(), |z| z[i].to_string());
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            truth.gene_ids[i], truth.s[i], truth.h[i], truth.beta[i], truth.delta[i], zeta, truth.de[i] as u8
        )?;
    }
    Ok(())
}

pub fn read_truth_tsv<R: BufRead>(reader: R) -> Result<SimTruth> {
    let mut t = SimTruth {
        gene_ids: Vec::new(),
        s: Vec::new(),
        h: Vec::new(),
        beta: Vec::new(),
        delta: Vec::new(),
        zeta: None,
        de: Vec::new(),
    };
    let mut zeta = Vec::new();
    let mut any_na = false;
    let mut header = false;
    for (idx, line) in reader.lines().enumerate() {
        let perr = |msg: String| Error::Parse { line: idx + 1, msg };
        let line = line.map_err(|e| perr(e.to_string()))?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header {
            if line.trim() != TRUTH_HEADER {
                return Err(perr("unexpected truth header".into()));
            }
            header = true;
            continue;
        }
        let c: Vec<&str> = line.split('\t').collect();
        if c.len() != 7 {
            return Err(perr(format!("expected 7 columns, found {}", c.len())));
        }
        let f = |s: &str| s.parse::<f64>().map_err(|_| perr(format!("invalid number {s:?}")));
        let lab = |s: &str| s.parse::<u8>().map_err(|_| perr(format!("invalid state {s:?}")));
        t.gene_ids.push(c[0].into());
        t.s.push(lab(c[1])?);
        t.h.push(lab(c[2])?);
        t.beta.push(f(c[3])?);
        t.delta.push(f(c[4])?);
        if c[5] == "NA" {
            any_na = true;
        } else {
            zeta.push(f(c[5])?);
        }
        t.de.push(match c[6] {
            "1" => true,
            "0" => false,
            o => return Err(perr(format!("invalid de flag {o:?}"))),
        });
    }
    if !any_na && !zeta.is_empty() {
        t.zeta = Some(zeta);
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn em3() -> Vec<Emission<f64>> {
        vec![Emission::new(-0.4, 0.013), Emission::new(0.0, 0.01), Emission::new(0.4, 0.013)]
    }

    #[test]
    fn fmm_frequencies() {
        let m = StateModel::fmm(vec![0.22, 0.56, 0.22], em3()).unwrap();
        let s = simulate_states(&m, 100_000, &mut rng(1));
        let c = s.counts(3);
        for (t, p) in [0.22, 0.56, 0.22].iter().enumerate() {
            assert!((c[t] as f64 / 1e5 - p).abs() < 0.01);
        }
    }

    #[test]
    fn hmm_transition_frequencies() {
        let b = vec![0.50, 0.25, 0.25, 0.10, 0.80, 0.10, 0.25, 0.25, 0.50];
        let m = StateModel::hmm(b.clone(), em3()).unwrap();
        let s = simulate_states(&m, 100_000, &mut rng(2));
        let mut n = [[0usize; 3]; 3];
        for w in s.0.windows(2) {
            n[w[0] as usize][w[1] as usize] += 1;
        }
        for i in 0..3 {
            let row: usize = n[i].iter().sum();
            for j in 0..3 {
                assert!((n[i][j] as f64 / row as f64 - b[i * 3 + j]).abs() < 0.01);
            }
        }
    }

    #[test]
    fn hmm_first_state_is_stationary() {
        let em = vec![Emission::new(1.0, 0.37), Emission::new(3.91, 2.4)];
        let m = StateModel::hmm(vec![0.5, 0.5, 0.05, 0.95], em).unwrap();
        let mut r = rng(3);
        let hits = (0..100_000).filter(|_| simulate_states(&m, 1, &mut r).get(0) == 1).count();
        assert!((hits as f64 / 1e5 - 10.0 / 11.0).abs() < 0.005);
    }

    #[test]
    fn negbin_moments() {
        let mut r = rng(4);
        let x: Vec<f64> = (0..100_000).map(|_| negbin_draw(10.0, 0.5, &mut r) as f64).collect();
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let v = x.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
        assert!((m - 10.0).abs() / 10.0 < 0.02);
        assert!((v - 60.0).abs() / 60.0 < 0.05);
    }

    #[test]
    fn negbin_poisson_limit() {
        let mut r = rng(5);
        let x: Vec<f64> = (0..100_000).map(|_| negbin_draw(10.0, 1e-6, &mut r) as f64).collect();
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let v = x.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
        assert!((v / m - 1.0).abs() < 0.05);
    }

    #[test]
    fn poisson_mean_identity() {
        let mut r = rng(6);
        let e = 1f64.exp();
        let m = (0..100_000).map(|_| poisson_draw(e, &mut r) as f64).sum::<f64>() / 1e5;
        assert!((m - e).abs() / e < 0.02);
    }

    #[test]
    fn gamma_moments_fit() {
        let (a, b) = fit_dispersion_gamma(&[0.1, 0.3]).unwrap();
        // mean 0.2, sample variance 0.02
        assert!((a - 2.0).abs() < 1e-12 && (b - 0.1).abs() < 1e-12);
        assert!(fit_dispersion_gamma(&[0.2, 0.2, 0.2]).is_err());
        assert!(fit_dispersion_gamma(&[0.2]).is_err());
        let g = Gamma::new(2.0, 0.1).unwrap();
        let mut r = rng(7);
        let x: Vec<f64> = (0..10_000).map(|_| g.sample(&mut r)).collect();
        let (a, b) = fit_dispersion_gamma(&x).unwrap();
        assert!((a - 2.0).abs() / 2.0 < 0.1 && (b - 0.1).abs() / 0.1 < 0.1);
    }

    #[test]
    fn dataset_shape_and_determinism() {
        let spec = SimSpec { seed: 11, ..SimSpec::desk() };
        let (cm, truth) = simulate_poisson_dataset(&spec).unwrap();
        assert_eq!(cm.n_genes(), 400);
        assert_eq!(cm.n_libraries(), 12);
        assert_eq!(truth.de.len(), 400);
        let (cm2, truth2) = simulate_poisson_dataset(&spec).unwrap();
        assert_eq!(cm, cm2);
        assert_eq!(truth, truth2);
        let (cm3, _) = simulate_poisson_dataset(&SimSpec { seed: 12, ..spec.clone() }).unwrap();
        assert_ne!(cm, cm3);
        assert!(simulate_negbin_dataset(&spec).is_err());
    }

    #[test]
    fn de_fraction_and_over_mean() {
        let spec = SimSpec { model: ModelChoice::FF, ..SimSpec::full() };
        let (_, t) = simulate_poisson_dataset(&spec).unwrap();
        let frac = t.de.iter().filter(|&&d| d).count() as f64 / t.de.len() as f64;
        assert!((frac - 0.44).abs() < 0.02, "{frac}");
        let over: Vec<f64> = t.delta.iter().zip(&t.h).filter(|(_, &h)| h == 3).map(|(&d, _)| d).collect();
        let m = over.iter().sum::<f64>() / over.len() as f64;
        assert!((m - 0.4).abs() < 0.01);
    }

    #[test]
    fn truth_roundtrip_and_negbin() {
        let spec = SimSpec {
            noise: Noise::NegBinomial { shape: 2.0, scale: 0.1 },
            sigma_eps2: 0.1,
            ..SimSpec::desk()
        };
        let (cm, t) = simulate_negbin_dataset(&spec).unwrap();
        assert!(cm.is_paired());
        let mut buf = Vec::new();
        write_truth_tsv(&mut buf, &t, &["x".into()]).unwrap();
        let back = read_truth_tsv(buf.as_slice()).unwrap();
        assert_eq!(back.gene_ids, t.gene_ids);
        assert_eq!(back.de, t.de);
        assert_eq!(back.zeta.as_ref().map(|z| z.len()), Some(400));
    }

    #[test]
    fn spec_toml_roundtrip() {
        let spec = SimSpec {
            noise: Noise::NegBinomial { shape: 2.0, scale: 0.1 },
            ..SimSpec::desk()
        };
        let text = toml::to_string(&spec).unwrap();
        let back: SimSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
        let partial: SimSpec = toml::from_str("chromosomes = 3\n").unwrap();
        assert_eq!(partial.genes_per_chromosome, 800);
        assert!(SimSpec { rho: Some(vec![0.0]), ..SimSpec::desk() }.validate().is_err());
    }
}
