//! Columnar text serialization of retained chain samples.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::scalar::Real;

use super::{Acceptance, ChainSamples, ModelChoice};

const HEADER: &str = "chromosome\tposition\titeration\tgene\th\tdelta\tbeta\ts";

/// Writes one row per (retained iteration, gene). A `# model=XX` line is
/// always emitted after the caller's comment lines.
pub fn write_samples_tsv<T: Real, W: Write>(mut out: W, chains: &[ChainSamples<T>], comments: &[String]) -> std::io::Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    if let Some(first) = chains.first() {
        writeln!(out, "# model={}", first.model)?;
    }
    writeln!(out, "{HEADER}")?;
    for ch in chains {
        let n = ch.n_genes();
        for (k, it) in ch.iterations.iter().enumerate() {
            for g in 0..n {
                let idx = k * n + g;
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    ch.chromosome, ch.positions[g], it, ch.gene_ids[g], ch.h[idx], ch.delta[idx], ch.beta[idx], ch.s[idx]
                )?;
            }
        }
    }
    Ok(())
}

/// Parsed contents of a samples file; diagnostics are not stored there so
/// the chains come back with empty hyperparameter and likelihood traces.
pub type SampleTable<T> = Vec<ChainSamples<T>>;

pub fn read_samples_tsv<T: Real, R: BufRead>(reader: R) -> Result<SampleTable<T>> {
    let mut model: Option<ModelChoice> = None;
    let mut chains: Vec<ChainSamples<T>> = Vec::new();
    let mut seen_header = false;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let perr = |msg: String| Error::Parse { line: lineno, msg };
        let line = line.map_err(|e| perr(e.to_string()))?;
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(m) = rest.trim().strip_prefix("model=") {
                model = Some(m.trim().parse()?);
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if !seen_header {
            if line.trim() != HEADER {
                return Err(perr(format!("unexpected samples header {line:?}")));
            }
            seen_header = true;
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 8 {
            return Err(perr(format!("expected 8 columns, found {}", cols.len())));
        }
        let num = |s: &str| -> Result<T> {
            s.parse::<f64>()
                .map(T::lit)
                .map_err(|_| perr(format!("invalid number {s:?}")))
        };
        let int = |s: &str| -> Result<i64> { s.parse::<i64>().map_err(|_| perr(format!("invalid integer {s:?}"))) };
        let chrom = cols[0];
        let position = int(cols[1])?;
        let iteration = int(cols[2])? as usize;
        let gene = cols[3];
        let h = int(cols[4])?;
        let s = int(cols[7])?;
        if !(1..=3).contains(&h) || !(1..=2).contains(&s) {
            return Err(perr("state label out of range".into()));
        }
        if chains.last().is_none_or(|c| c.chromosome != chrom) {
            if chains.iter().any(|c| c.chromosome == chrom) {
                return Err(perr(format!("chromosome {chrom} is not contiguous")));
            }
            chains.push(ChainSamples {
                model: model.unwrap_or(ModelChoice::HH),
                chromosome: chrom.to_string(),
                gene_ids: Vec::new(),
                positions: Vec::new(),
                iterations: Vec::new(),
                h: Vec::new(),
                s: Vec::new(),
                beta: Vec::new(),
                delta: Vec::new(),
                eps: None,
                n_subjects: 0,
                hyper: Vec::new(),
                deviance: Vec::new(),
                loglik: Vec::new(),
                acceptance: Acceptance::default(),
            });
        }
        let ch = chains.last_mut().unwrap();
        if ch.iterations.last() != Some(&iteration) {
            ch.iterations.push(iteration);
        }
        let k = ch.iterations.len() - 1;
        if k == 0 {
            ch.gene_ids.push(gene.to_string());
            ch.positions.push(position);
        } else {
            let g = ch.h.len() - k * ch.gene_ids.len();
            if ch.gene_ids.get(g).map(String::as_str) != Some(gene) {
                return Err(perr(format!("gene {gene} out of order in iteration {iteration}")));
            }
        }
        ch.h.push(h as u8);
        ch.s.push(s as u8);
        ch.delta.push(num(cols[5])?);
        ch.beta.push(num(cols[6])?);
    }
    if model.is_none() {
        return Err(Error::Sampler("samples file lacks a `# model=` line".into()));
    }
    for ch in &chains {
        if ch.h.len() != ch.iterations.len() * ch.gene_ids.len() {
            return Err(Error::Sampler(format!("chromosome {}: ragged samples", ch.chromosome)));
        }
    }
    Ok(chains)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::ChromosomeBlock;
    use crate::sampler::{chain_rng, run_chain, SamplerConfig};

    #[test]
    fn roundtrip_preserves_draws() {
        let cfg = SamplerConfig { iterations: 60, burn_in: 20, thin: 5, ..Default::default() };
        let b1 = ChromosomeBlock::<f64>::new("1", vec![3, 4, 9, 8, 40, 41, 38, 50], vec![1, 1, 2, 2], vec![0.0; 4], None).unwrap();
        let b2 = ChromosomeBlock::<f64>::new("2", vec![7, 7, 7, 7], vec![1, 1, 2, 2], vec![0.0; 4], None).unwrap();
        let chains: Vec<_> = [b1, b2]
            .iter()
            .map(|b| run_chain(b, ModelChoice::FH, &cfg, &mut chain_rng(1, &b.chromosome)).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_samples_tsv(&mut buf, &chains, &["tool test".into()]).unwrap();
        let back: SampleTable<f64> = read_samples_tsv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in chains.iter().zip(&back) {
            assert_eq!(b.model, ModelChoice::FH);
            assert_eq!(a.gene_ids, b.gene_ids);
            assert_eq!(a.iterations, b.iterations);
            assert_eq!(a.h, b.h);
            assert_eq!(a.s, b.s);
            assert_eq!(a.delta, b.delta);
            assert_eq!(a.beta, b.beta);
        }
    }

    #[test]
    fn rejects_bad_rows() {
        let text = format!("# model=HH\n{HEADER}\n1\t1\t1\tg\t4\t0.1\t1.0\t1\n");
        assert!(read_samples_tsv::<f64, _>(text.as_bytes()).is_err());
        let text = format!("{HEADER}\n1\t1\t1\tg\t1\t0.1\t1.0\t1\n");
        assert!(read_samples_tsv::<f64, _>(text.as_bytes()).is_err());
    }
}
