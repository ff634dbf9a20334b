//! Benchmark scoring against ground truth: ROC/AUC, FDR calibration,
//! call-set overlaps and the geometric gap test for spatial clustering.

use std::collections::{BTreeMap, BTreeSet};

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::detect::call_from_probs;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve<T> {
    /// (FPR, TPR) from (0, 0) to (1, 1), one step per distinct score.
    pub points: Vec<(T, T)>,
    pub auc: T,
}

/// Higher scores rank as more likely positive.
pub fn roc_curve<T: Real>(scores: &[T], truth: &[bool]) -> Result<RocCurve<T>> {
    if scores.len() != truth.len() {
        return Err(Error::Eval("scores and truth differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Eval("scores contain NaN".into()));
    }
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Eval("truth needs at least one positive and one negative".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("no NaN"));
    let (p, n) = (T::from_len(pos), T::from_len(neg));
    let mut points = vec![(T::zero(), T::zero())];
    let mut auc = T::zero();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if truth[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let next = (T::from_len(fp) / n, T::from_len(tp) / p);
        let prev = *points.last().expect("nonempty");
        auc = auc + (next.0 - prev.0) * (next.1 + prev.1) / T::lit(2.0);
        points.push(next);
    }
    Ok(RocCurve { points, auc })
}

/// False calls over total calls; 0 when nothing is called.
pub fn observed_fdr<T: Real>(called: &[usize], truth: &[bool]) -> T {
    if called.is_empty() {
        return T::zero();
    }
    let false_calls = called.iter().filter(|&&g| !truth[g]).count();
    T::from_len(false_calls) / T::from_len(called.len())
}

/// (nominal q0, observed FDR) for each grid value, calling with the
/// Bayesian FDR rule.
pub fn fdr_calibration<T: Real>(p_hat: &[T], truth: &[bool], grid: &[T]) -> Result<Vec<(T, T)>> {
    if p_hat.len() != truth.len() {
        return Err(Error::Eval("probabilities and truth differ in length".into()));
    }
    grid.iter()
        .map(|&q| {
            let r = call_from_probs(p_hat, q).map_err(|e| Error::Eval(e.to_string()))?;
            Ok((q, observed_fdr(&r.called, truth)))
        })
        .collect()
}

/// Exclusive region counts of a 2–4 set Venn diagram, keyed by the sorted
/// names of the sets each region belongs to.
pub fn overlap_counts(sets: &[(String, BTreeSet<String>)]) -> Result<BTreeMap<Vec<String>, usize>> {
    if !(2..=4).contains(&sets.len()) {
        return Err(Error::Eval(format!("overlap needs 2 to 4 sets, got {}", sets.len())));
    }
    let mut out: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    for mask in 1u32..(1 << sets.len()) {
        let mut key: Vec<String> = (0..sets.len()).filter(|b| mask >> b & 1 == 1).map(|b| sets[b].0.clone()).collect();
        key.sort();
        out.insert(key, 0);
    }
    let universe: BTreeSet<&String> = sets.iter().flat_map(|(_, s)| s.iter()).collect();
    for g in universe {
        let mut key: Vec<String> = sets.iter().filter(|(_, s)| s.contains(g)).map(|(n, _)| n.clone()).collect();
        key.sort();
        *out.get_mut(&key).expect("every region is pre-registered") += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapCell {
    /// Smallest gap in the cell.
    pub lo: usize,
    /// Largest gap, `None` for the open tail.
    pub hi: Option<usize>,
    pub observed: usize,
    pub expected: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialTest {
    pub n_gaps: usize,
    pub p_hat: f64,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub cells: Vec<GapCell>,
}

/// Numbers of non-DE genes between consecutive DE genes, pooled over
/// chromosomes; the stretches before the first and after the last DE gene
/// are censored and dropped.
pub fn gaps(calls: &[Vec<bool>]) -> Vec<usize> {
    let mut out = Vec::new();
    for chrom in calls {
        let mut last: Option<usize> = None;
        for (i, &c) in chrom.iter().enumerate() {
            if c {
                if let Some(j) = last {
                    out.push(i - j - 1);
                }
                last = Some(i);
            }
        }
    }
    out
}

const MIN_EXPECTED: f64 = 5.0;

/// χ² goodness of fit of the pooled gaps to Geometric(p̂) on {0, 1, …},
/// with p̂ = #DE / #genes. Cells run over the support where the null tail
/// still has expected count ≥ 5, merged right to left until every expected
/// count reaches 5; one degree of freedom is spent on p̂.
pub fn spatial_geometric_test(calls: &[Vec<bool>], min_gaps: usize) -> Result<SpatialTest> {
    let g = gaps(calls);
    if g.len() < min_gaps.max(1) {
        return Err(Error::Eval(format!("insufficient gaps: {} < {}", g.len(), min_gaps.max(1))));
    }
    let n_genes: usize = calls.iter().map(Vec::len).sum();
    let n_de: usize = calls.iter().map(|c| c.iter().filter(|&&x| x).count()).sum();
    let p = n_de as f64 / n_genes as f64;
    if p >= 1.0 {
        return Err(Error::Eval("every gene is DE; geometric law is degenerate".into()));
    }
    let n = g.len() as f64;
    let q = 1.0 - p;
    // largest K with n·q^K ≥ 5: cells 0..K-1 plus the tail [K, ∞)
    let k_max = if n < MIN_EXPECTED {
        0
    } else {
        ((MIN_EXPECTED / n).ln() / q.ln()).floor().clamp(0.0, 1e6) as usize
    };
    let mut obs = vec![0usize; k_max + 1];
    for &x in &g {
        obs[x.min(k_max)] += 1;
    }
    let mut cells = vec![GapCell {
        lo: k_max,
        hi: None,
        observed: obs[k_max],
        expected: n * q.powi(k_max as i32),
    }];
    let (mut acc_o, mut acc_e, mut hi) = (0usize, 0.0f64, None);
    for x in (0..k_max).rev() {
        hi.get_or_insert(x);
        acc_o += obs[x];
        acc_e += n * p * q.powi(x as i32);
        if acc_e >= MIN_EXPECTED {
            cells.push(GapCell { lo: x, hi, observed: acc_o, expected: acc_e });
            (acc_o, acc_e, hi) = (0, 0.0, None);
        }
    }
    if acc_e > 0.0 {
        let last = cells.last_mut().expect("tail cell present");
        last.lo = 0;
        last.observed += acc_o;
        last.expected += acc_e;
    }
    cells.reverse();
    if cells.len() < 3 {
        return Err(Error::Eval(format!(
            "insufficient gaps: only {} cells with expected count >= 5",
            cells.len()
        )));
    }
    let statistic: f64 = cells.iter().map(|c| (c.observed as f64 - c.expected).powi(2) / c.expected).sum();
    let df = cells.len() - 2;
    let p_value = ChiSquared::new(df as f64).expect("df >= 1").sf(statistic);
    Ok(SpatialTest {
        n_gaps: g.len(),
        p_hat: p,
        statistic,
        df,
        p_value,
        cells,
    })
}
