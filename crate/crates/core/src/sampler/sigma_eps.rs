//! Empirical-Bayes estimate of the subject random-effect variance.

use crate::error::{Error, Result};
use crate::ingest::CountMatrix;
use crate::scalar::Real;

use super::working::{laplace_at, SiteObs};

const MAX_ITER: usize = 100;
const MAX_STEP: f64 = 2.0;

/// Per-gene Poisson fit of log λ_jk = a_j + ε_k + ρ_jk by coordinatewise
/// working-value (Newton) updates, with Σε = 0. Returns a method-of-moments
/// estimate of Var(ε): the spread of ε̂ minus its mean sampling variance.
fn gene_variance<T: Real>(row: &[u64], treatment: &[u8], subject: &[usize], n_subj: usize, rho: &[T]) -> Option<T> {
    let mut a = [T::zero(); 2];
    for j in 0..2u8 {
        let (mut y, mut off) = (0u64, T::zero());
        for l in (0..row.len()).filter(|&l| treatment[l] == j + 1) {
            y += row[l];
            off = off + rho[l].exp();
        }
        if y == 0 {
            return None;
        }
        a[j as usize] = (T::from_count(y) / off).ln();
    }
    for k in 0..n_subj {
        if (0..row.len()).filter(|&l| subject[l] == k).all(|l| row[l] == 0) {
            return None;
        }
    }

    let mut eps = vec![T::zero(); n_subj];
    let mut obs = SiteObs::<T>::default();
    let max_step = T::lit(MAX_STEP);
    let tol = T::lit(1e-10).max(T::epsilon() * T::lit(100.0));
    let mut precision = vec![T::zero(); n_subj];
    for _ in 0..MAX_ITER {
        let mut change = T::zero();
        for j in 0..2u8 {
            obs.clear();
            for l in (0..row.len()).filter(|&l| treatment[l] == j + 1) {
                obs.push(row[l], eps[subject[l]] + rho[l], T::one());
            }
            let old = a[j as usize];
            let step = (laplace_at(&obs, old).collapsed.w_star - old).max(-max_step).min(max_step);
            a[j as usize] = old + step;
            change = change.max(step.abs());
        }
        for (k, e) in eps.iter_mut().enumerate() {
            obs.clear();
            for l in (0..row.len()).filter(|&l| subject[l] == k) {
                obs.push(row[l], a[(treatment[l] - 1) as usize] + rho[l], T::one());
            }
            let cs = laplace_at(&obs, *e).collapsed;
            let step = (cs.w_star - *e).max(-max_step).min(max_step);
            *e = *e + step;
            precision[k] = cs.precision;
            change = change.max(step.abs());
        }
        let mean = eps.iter().copied().sum::<T>() / T::from_len(n_subj);
        eps.iter_mut().for_each(|e| *e = *e - mean);
        a.iter_mut().for_each(|x| *x = *x + mean);
        if change < tol {
            break;
        }
    }
    let k = T::from_len(n_subj);
    let spread = eps.iter().map(|&e| e * e).sum::<T>() / (k - T::one());
    let noise = precision.iter().map(|&p| T::one() / p).sum::<T>() / k;
    Some((spread - noise).max(T::zero()))
}

/// Median over genes of the per-gene random-effect variance estimates,
/// floored at 1e-6. Genes where some subject or treatment has no reads are
/// skipped (the per-gene fit has no finite optimum).
pub fn estimate_sigma_eps<T: Real>(cm: &CountMatrix, rho: &[T]) -> Result<T> {
    if !cm.is_paired() {
        return Err(Error::Sampler("sigma_eps estimation needs a paired layout".into()));
    }
    if rho.len() != cm.n_libraries() {
        return Err(Error::Sampler("rho length does not match libraries".into()));
    }
    let mut ids: Vec<u32> = Vec::new();
    let subject: Vec<usize> = cm
        .libraries()
        .iter()
        .map(|l| {
            let s = l.subject.unwrap();
            ids.iter().position(|&x| x == s).unwrap_or_else(|| {
                ids.push(s);
                ids.len() - 1
            })
        })
        .collect();
    if ids.len() < 2 {
        return Err(Error::Sampler("sigma_eps estimation needs at least 2 subjects".into()));
    }
    let treatment: Vec<u8> = cm.libraries().iter().map(|l| l.treatment).collect();
    let mut est: Vec<T> = (0..cm.n_genes())
        .filter_map(|g| gene_variance(cm.row(g), &treatment, &subject, ids.len(), rho))
        .collect();
    if est.is_empty() {
        return Err(Error::Sampler("no gene supports a subject-effect fit".into()));
    }
    est.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = est.len();
    let median = if n % 2 == 1 {
        est[n / 2]
    } else {
        (est[n / 2 - 1] + est[n / 2]) / T::lit(2.0)
    };
    Ok(median.max(T::lit(1e-6)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{GeneMeta, LibraryMeta};

    fn paired_matrix(rows: Vec<Vec<u64>>, n_subj: u32) -> CountMatrix {
        let mut libs = Vec::new();
        for t in 1..=2u8 {
            for s in 1..=n_subj {
                libs.push(LibraryMeta { name: format!("t{t}s{s}"), treatment: t, replicate: s, subject: Some(s) });
            }
        }
        let genes = (0..rows.len())
            .map(|i| GeneMeta { id: format!("g{i}"), chromosome: "1".into(), position: i as i64 })
            .collect();
        CountMatrix::new(genes, libs, rows.concat()).unwrap()
    }

    #[test]
    fn identical_subjects_give_floor() {
        let cm = paired_matrix(vec![vec![20, 20, 30, 30], vec![5, 5, 9, 9], vec![100, 100, 80, 80]], 2);
        let v: f64 = estimate_sigma_eps(&cm, &[0.0; 4]).unwrap();
        assert_eq!(v, 1e-6);
    }

    #[test]
    fn fit_recovers_exact_subject_effects() {
        // counts exactly proportional to exp(a_j + ε_k): ε = ±0.5·log 4
        let row = [10, 40, 30, 120];
        let v = gene_variance::<f64>(&row, &[1, 1, 2, 2], &[0, 1, 0, 1], 2, &[0.0; 4]).unwrap();
        // ε̂ = ±log 2 → spread 2·(log 2)²; sampling variance mean of 1/40 and 1/160
        let expect = 2.0 * 2f64.ln().powi(2) - (1.0 / 40.0 + 1.0 / 160.0) / 2.0;
        assert!((v - expect).abs() < 1e-8, "{v} vs {expect}");
    }

    #[test]
    fn errors() {
        let cm = paired_matrix(vec![vec![1, 2]], 1);
        assert!(estimate_sigma_eps::<f64>(&cm, &[0.0; 2]).is_err());
        let cm = paired_matrix(vec![vec![0, 0, 0, 0]], 2);
        assert!(estimate_sigma_eps::<f64>(&cm, &[0.0; 4]).is_err());
    }
}
