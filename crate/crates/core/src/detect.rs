//! Posterior DE probabilities and the Bayesian FDR decision rule.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::sampler::ChainSamples;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneRef {
    pub id: String,
    pub chromosome: String,
    pub position: i64,
}

/// Per-gene posterior summaries, in chromosome-then-position order.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary<T> {
    pub genes: Vec<GeneRef>,
    /// P(h ∈ {1, 3}).
    pub p_de: Vec<T>,
    pub p_under: Vec<T>,
    pub p_over: Vec<T>,
    pub mean_delta: Vec<T>,
    pub mean_beta: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult<T> {
    /// Gene indices by decreasing p_de (stable on ties).
    pub order: Vec<usize>,
    /// Expected FDR of the top-d call set, d = 1..N, along `order`.
    pub fdr_path: Vec<T>,
    /// Indices of the called genes, in `order` order.
    pub called: Vec<usize>,
    pub q0: T,
}

impl<T: Real> DetectionResult<T> {
    /// 1-based rank of every gene.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = vec![0; self.order.len()];
        for (k, &g) in self.order.iter().enumerate() {
            r[g] = k + 1;
        }
        r
    }

    pub fn is_called(&self) -> Vec<bool> {
        let mut c = vec![false; self.order.len()];
        for &g in &self.called {
            c[g] = true;
        }
        c
    }
}

/// Monte Carlo frequencies of the DE states across all retained samples.
pub fn posterior_de_prob<T: Real>(samples: &[ChainSamples<T>]) -> Result<PosteriorSummary<T>> {
    let mut out = PosteriorSummary {
        genes: Vec::new(),
        p_de: Vec::new(),
        p_under: Vec::new(),
        p_over: Vec::new(),
        mean_delta: Vec::new(),
        mean_beta: Vec::new(),
    };
    for ch in samples {
        if ch.n_samples() == 0 {
            return Err(Error::Detect(format!("chromosome {} has no retained samples", ch.chromosome)));
        }
        let n = T::from_len(ch.n_samples());
        for g in 0..ch.n_genes() {
            let (mut under, mut over) = (0usize, 0usize);
            for h in ch.h_column(g) {
                match h {
                    1 => under += 1,
                    3 => over += 1,
                    _ => {}
                }
            }
            out.genes.push(GeneRef {
                id: ch.gene_ids[g].clone(),
                chromosome: ch.chromosome.clone(),
                position: ch.positions[g],
            });
            out.p_under.push(T::from_len(under) / n);
            out.p_over.push(T::from_len(over) / n);
            out.p_de.push(T::from_len(under + over) / n);
        }
        out.mean_delta.extend(ch.posterior_mean_delta());
        out.mean_beta.extend(ch.posterior_mean_beta());
    }
    Ok(out)
}

fn decreasing_order<T: Real>(p_hat: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p_hat.len()).collect();
    order.sort_by(|&a, &b| p_hat[b].partial_cmp(&p_hat[a]).unwrap_or(std::cmp::Ordering::Equal));
    order
}

fn path_along<T: Real>(p_hat: &[T], order: &[usize]) -> Vec<T> {
    let mut sum = T::zero();
    let mut prev = T::zero();
    order
        .iter()
        .enumerate()
        .map(|(k, &g)| {
            sum = sum + (T::one() - p_hat[g]);
            // the running mean of a nondecreasing sequence cannot drop; clamp rounding
            prev = prev.max(sum / T::from_len(k + 1));
            prev
        })
        .collect()
}

/// FDR̂_d = Σ_{i≤d} (1 − p̂_(i)) / d with p̂ sorted decreasingly.
pub fn expected_fdr_path<T: Real>(p_hat: &[T]) -> Vec<T> {
    path_along(p_hat, &decreasing_order(p_hat))
}

/// Calls the largest top-d set with FDR̂_d < q0 directly from probabilities.
pub fn call_from_probs<T: Real>(p_hat: &[T], q0: T) -> Result<DetectionResult<T>> {
    if !(q0 > T::zero() && q0 < T::one()) {
        return Err(Error::Detect(format!("q0 must lie in (0, 1), got {q0}")));
    }
    if p_hat.iter().any(|&p| !(p >= T::zero() && p <= T::one())) {
        return Err(Error::Detect("posterior probabilities must lie in [0, 1]".into()));
    }
    let order = decreasing_order(p_hat);
    let fdr_path = path_along(p_hat, &order);
    let d = fdr_path.iter().take_while(|&&f| f < q0).count();
    Ok(DetectionResult {
        called: order[..d].to_vec(),
        order,
        fdr_path,
        q0,
    })
}

pub fn call_de<T: Real>(summary: &PosteriorSummary<T>, q0: T) -> Result<DetectionResult<T>> {
    call_from_probs(&summary.p_de, q0)
}

const TABLE_HEADER: &str =
    "gene_id\tchromosome\tposition\tp_de\tp_under\tp_over\tmean_delta\tmean_beta\trank\tfdr_hat\tcalled";

/// One row per gene in summary order.
pub fn write_detection_tsv<T: Real, W: Write>(
    mut out: W,
    summary: &PosteriorSummary<T>,
    result: &DetectionResult<T>,
    comments: &[String],
) -> std::io::Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "# q0={}", result.q0)?;
    writeln!(out, "{TABLE_HEADER}")?;
    let ranks = result.ranks();
    let called = result.is_called();
    for (g, gene) in summary.genes.iter().enumerate() {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            gene.id,
            gene.chromosome,
            gene.position,
            summary.p_de[g],
            summary.p_under[g],
            summary.p_over[g],
            summary.mean_delta[g],
            summary.mean_beta[g],
            ranks[g],
            result.fdr_path[ranks[g] - 1],
            called[g] as u8
        )?;
    }
    Ok(())
}

/// Per-gene table plus the call flags read back from [`write_detection_tsv`].
pub fn read_detection_tsv<T: Real, R: BufRead>(reader: R) -> Result<(PosteriorSummary<T>, Vec<bool>)> {
    let mut summary = PosteriorSummary {
        genes: Vec::new(),
        p_de: Vec::new(),
        p_under: Vec::new(),
        p_over: Vec::new(),
        mean_delta: Vec::new(),
        mean_beta: Vec::new(),
    };
    let mut called = Vec::new();
    let mut header = false;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let perr = |msg: String| Error::Parse { line: lineno, msg };
        let line = line.map_err(|e| perr(e.to_string()))?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header {
            if line.trim() != TABLE_HEADER {
                return Err(perr("unexpected detection table header".into()));
            }
            header = true;
            continue;
        }
        let c: Vec<&str> = line.split('\t').collect();
        if c.len() != 11 {
            return Err(perr(format!("expected 11 columns, found {}", c.len())));
        }
        let num = |s: &str| s.parse::<f64>().map(T::lit).map_err(|_| perr(format!("invalid number {s:?}")));
        summary.genes.push(GeneRef {
            id: c[0].into(),
            chromosome: c[1].into(),
            position: c[2].parse().map_err(|_| perr("invalid position".into()))?,
        });
        summary.p_de.push(num(c[3])?);
        summary.p_under.push(num(c[4])?);
        summary.p_over.push(num(c[5])?);
        summary.mean_delta.push(num(c[6])?);
        summary.mean_beta.push(num(c[7])?);
        called.push(match c[10] {
            "1" => true,
            "0" => false,
            other => return Err(perr(format!("invalid called flag {other:?}"))),
        });
    }
    Ok((summary, called))
}
