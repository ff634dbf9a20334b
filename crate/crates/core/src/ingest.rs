//! Count-matrix loading, low-count filtering, upper-quartile library offsets
//! and chromosome partitioning.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneMeta {
    pub id: String,
    pub chromosome: String,
    pub position: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibraryMeta {
    #[serde(skip)]
    pub name: String,
    /// Treatment label, 1 or 2.
    pub treatment: u8,
    pub replicate: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<u32>,
}

/// Sidecar description of the library columns, keyed by column name.
///
/// ```toml
/// [library.ctrl_1]
/// treatment = 1
/// replicate = 1
/// subject = 1
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    #[serde(default)]
    pub library: BTreeMap<String, LibraryMeta>,
}

impl Layout {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Ingest(format!("layout: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("layout serializes")
    }

    /// Layout for a matrix's own library metadata.
    pub fn of(cm: &CountMatrix) -> Self {
        let library = cm
            .libraries
            .iter()
            .map(|l| (l.name.clone(), l.clone()))
            .collect();
        Layout { library }
    }

    fn resolve(&self, name: &str) -> Option<LibraryMeta> {
        self.library.get(name).map(|m| LibraryMeta {
            name: name.to_string(),
            ..m.clone()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Delimiter {
    Tab,
    Comma,
    /// Tab if the header line contains one, otherwise comma.
    #[default]
    Auto,
}

#[derive(Debug, Clone, Default)]
pub struct CountFormat {
    pub delimiter: Delimiter,
    pub layout: Layout,
}

/// Gene × library integer read counts with gene and library metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct CountMatrix {
    genes: Vec<GeneMeta>,
    libraries: Vec<LibraryMeta>,
    counts: Vec<u64>,
}

impl CountMatrix {
    /// Builds a matrix from row-major counts, checking every invariant.
    pub fn new(genes: Vec<GeneMeta>, libraries: Vec<LibraryMeta>, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != genes.len() * libraries.len() {
            return Err(Error::Ingest(format!(
                "count buffer has {} cells, expected {} x {}",
                counts.len(),
                genes.len(),
                libraries.len()
            )));
        }
        let mut ids = HashSet::with_capacity(genes.len());
        let mut last_pos: HashMap<&str, i64> = HashMap::new();
        for g in &genes {
            if !ids.insert(g.id.as_str()) {
                return Err(Error::Ingest(format!("duplicate gene id {}", g.id)));
            }
            if let Some(&p) = last_pos.get(g.chromosome.as_str()) {
                if g.position <= p {
                    return Err(Error::Ingest(format!(
                        "gene {} on chromosome {}: positions must strictly increase",
                        g.id, g.chromosome
                    )));
                }
            }
            last_pos.insert(&g.chromosome, g.position);
        }
        validate_libraries(&libraries)?;
        Ok(CountMatrix {
            genes,
            libraries,
            counts,
        })
    }

    pub fn genes(&self) -> &[GeneMeta] {
        &self.genes
    }

    pub fn libraries(&self) -> &[LibraryMeta] {
        &self.libraries
    }

    pub fn n_genes(&self) -> usize {
        self.genes.len()
    }

    pub fn n_libraries(&self) -> usize {
        self.libraries.len()
    }

    pub fn row(&self, gene: usize) -> &[u64] {
        let l = self.libraries.len();
        &self.counts[gene * l..(gene + 1) * l]
    }

    pub fn get(&self, gene: usize, library: usize) -> u64 {
        self.counts[gene * self.libraries.len() + library]
    }

    pub fn column(&self, library: usize) -> impl Iterator<Item = u64> + '_ {
        (0..self.genes.len()).map(move |g| self.get(g, library))
    }

    pub fn is_paired(&self) -> bool {
        !self.libraries.is_empty() && self.libraries.iter().all(|l| l.subject.is_some())
    }

    fn select_rows(&self, keep: impl Fn(usize) -> bool) -> CountMatrix {
        let mut genes = Vec::new();
        let mut counts = Vec::new();
        for (g, meta) in self.genes.iter().enumerate() {
            if keep(g) {
                genes.push(meta.clone());
                counts.extend_from_slice(self.row(g));
            }
        }
        CountMatrix {
            genes,
            libraries: self.libraries.clone(),
            counts,
        }
    }

    /// Writes the delimited text format read by [`load_counts`]. Each
    /// `comments` line is emitted first, prefixed with `# `.
    pub fn write_tsv<W: Write>(&self, mut out: W, comments: &[String]) -> std::io::Result<()> {
        for c in comments {
            writeln!(out, "# {c}")?;
        }
        write!(out, "gene_id\tchromosome\tposition")?;
        for l in &self.libraries {
            write!(out, "\t{}", l.name)?;
        }
        writeln!(out)?;
        for (g, meta) in self.genes.iter().enumerate() {
            write!(out, "{}\t{}\t{}", meta.id, meta.chromosome, meta.position)?;
            for c in self.row(g) {
                write!(out, "\t{c}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

fn validate_libraries(libraries: &[LibraryMeta]) -> Result<()> {
    for l in libraries {
        if l.treatment != 1 && l.treatment != 2 {
            return Err(Error::Ingest(format!(
                "library {}: treatment must be 1 or 2, got {}",
                l.name, l.treatment
            )));
        }
        if l.replicate < 1 {
            return Err(Error::Ingest(format!("library {}: replicate must be >= 1", l.name)));
        }
    }
    let with_subject = libraries.iter().filter(|l| l.subject.is_some()).count();
    if with_subject == 0 {
        return Ok(());
    }
    if with_subject != libraries.len() {
        return Err(Error::Ingest(
            "paired layout: every library needs a subject".to_string(),
        ));
    }
    let mut seen: HashMap<u32, [u32; 2]> = HashMap::new();
    for l in libraries {
        seen.entry(l.subject.unwrap()).or_default()[(l.treatment - 1) as usize] += 1;
    }
    let mut subjects: Vec<_> = seen.into_iter().collect();
    subjects.sort();
    for (s, per) in subjects {
        if per != [1, 1] {
            return Err(Error::Ingest(format!(
                "paired layout: subject {s} must appear exactly once per treatment"
            )));
        }
    }
    Ok(())
}

pub fn load_counts(path: impl AsRef<Path>, format: &CountFormat) -> Result<CountMatrix> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_counts(BufReader::new(file), format)
}

/// Parses delimited counts. Lines starting with `#` and blank lines are skipped.
pub fn read_counts<R: BufRead>(reader: R, format: &CountFormat) -> Result<CountMatrix> {
    let mut header: Option<(Vec<LibraryMeta>, char)> = None;
    let mut genes = Vec::new();
    let mut counts = Vec::new();
    let mut ids: HashSet<String> = HashSet::new();
    let mut last_pos: HashMap<String, i64> = HashMap::new();

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((libs, delim)) = &header else {
            let delim = match format.delimiter {
                Delimiter::Tab => '\t',
                Delimiter::Comma => ',',
                Delimiter::Auto if line.contains('\t') => '\t',
                Delimiter::Auto => ',',
            };
            let cols: Vec<&str> = line.split(delim).map(str::trim).collect();
            if cols.len() < 4 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "header needs gene_id, chromosome, position and at least one library".into(),
                });
            }
            let mut libs = Vec::with_capacity(cols.len() - 3);
            for name in &cols[3..] {
                let meta = format.layout.resolve(name).ok_or_else(|| Error::Parse {
                    line: lineno,
                    msg: format!("library {name} missing from layout"),
                })?;
                libs.push(meta);
            }
            header = Some((libs, delim));
            continue;
        };
        let cols: Vec<&str> = line.split(*delim).map(str::trim).collect();
        if cols.len() != libs.len() + 3 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {} columns, found {}", libs.len() + 3, cols.len()),
            });
        }
        let id = cols[0].to_string();
        if !ids.insert(id.clone()) {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("duplicate gene id {id}"),
            });
        }
        let position: i64 = cols[2].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("invalid position {:?}", cols[2]),
        })?;
        let chromosome = cols[1].to_string();
        if let Some(&p) = last_pos.get(&chromosome) {
            if position <= p {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("position {position} does not increase on chromosome {chromosome}"),
                });
            }
        }
        last_pos.insert(chromosome.clone(), position);
        for raw in &cols[3..] {
            let c = parse_count(raw).map_err(|msg| Error::Parse { line: lineno, msg })?;
            counts.push(c);
        }
        genes.push(GeneMeta {
            id,
            chromosome,
            position,
        });
    }
    let (libraries, _) = header.ok_or_else(|| Error::Ingest("empty count file".into()))?;
    CountMatrix::new(genes, libraries, counts)
}

fn parse_count(raw: &str) -> std::result::Result<u64, String> {
    match raw.parse::<i64>() {
        Ok(v) if v < 0 => Err(format!("negative count {v}")),
        Ok(v) => Ok(v as u64),
        Err(_) => Err(format!("non-integer count {raw:?}")),
    }
}

/// Keeps the genes whose total count across libraries is at least `threshold`.
pub fn filter_low_counts(cm: &CountMatrix, threshold: u64) -> CountMatrix {
    cm.select_rows(|g| cm.row(g).iter().sum::<u64>() >= threshold)
}

/// Sample quantile with linear interpolation between order statistics.
fn quantile_sorted<T: Real>(sorted: &[T], q: T) -> T {
    let h = q * T::from_len(sorted.len() - 1);
    let lo = h.floor();
    let i = lo.to_usize().unwrap_or(0);
    if i + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[i] + (h - lo) * (sorted[i + 1] - sorted[i])
}

/// Log upper-quartile library offsets, centered to sum to zero.
///
/// The upper quartile of each library is taken over the genes with a nonzero
/// count in that library.
pub fn upper_quartile_effects<T: Real>(cm: &CountMatrix) -> Result<Vec<T>> {
    let mut log_uq = Vec::with_capacity(cm.n_libraries());
    for (l, meta) in cm.libraries().iter().enumerate() {
        let mut nz: Vec<T> = cm
            .column(l)
            .filter(|&c| c > 0)
            .map(T::from_count)
            .collect();
        if nz.is_empty() {
            return Err(Error::Ingest(format!("library {} has no nonzero counts", meta.name)));
        }
        nz.sort_by(|a, b| a.partial_cmp(b).unwrap());
        log_uq.push(quantile_sorted(&nz, T::lit(0.75)).ln());
    }
    let mean = log_uq.iter().copied().sum::<T>() / T::from_len(log_uq.len().max(1));
    Ok(log_uq.into_iter().map(|v| v - mean).collect())
}

/// The counts of one chromosome together with the library offsets.
#[derive(Debug, Clone)]
pub struct ChromosomeBlock<T> {
    pub chromosome: String,
    pub gene_ids: Vec<String>,
    pub positions: Vec<i64>,
    /// Row-major genes × libraries.
    pub counts: Vec<u64>,
    pub rho: Vec<T>,
    /// Treatment (1 or 2) of each library.
    pub treatment: Vec<u8>,
    /// Dense 0-based subject index of each library (paired designs only).
    pub subject: Option<Vec<usize>>,
    pub n_subjects: usize,
}

impl<T: Real> ChromosomeBlock<T> {
    /// Builds a block directly; used by tests and the simulator.
    pub fn new(
        chromosome: impl Into<String>,
        counts: Vec<u64>,
        treatment: Vec<u8>,
        rho: Vec<T>,
        subject: Option<Vec<usize>>,
    ) -> Result<Self> {
        let l = treatment.len();
        if l == 0 || !counts.len().is_multiple_of(l) {
            return Err(Error::Ingest("block counts do not match library count".into()));
        }
        if rho.len() != l {
            return Err(Error::Ingest(format!("rho has {} entries, expected {l}", rho.len())));
        }
        if rho.iter().any(|r| !r.is_finite()) {
            return Err(Error::Ingest("rho must be finite".into()));
        }
        let n = counts.len() / l;
        let n_subjects = match &subject {
            Some(s) if s.len() != l => {
                return Err(Error::Ingest("subject map does not match library count".into()))
            }
            Some(s) => s.iter().max().map_or(0, |m| m + 1),
            None => 0,
        };
        Ok(ChromosomeBlock {
            chromosome: chromosome.into(),
            gene_ids: (0..n).map(|i| format!("g{i}")).collect(),
            positions: (0..n as i64).collect(),
            counts,
            rho,
            treatment,
            subject,
            n_subjects,
        })
    }

    pub fn n_genes(&self) -> usize {
        self.gene_ids.len()
    }

    pub fn n_libraries(&self) -> usize {
        self.treatment.len()
    }

    #[inline]
    pub fn count(&self, gene: usize, library: usize) -> u64 {
        self.counts[gene * self.treatment.len() + library]
    }

    pub fn row(&self, gene: usize) -> &[u64] {
        let l = self.treatment.len();
        &self.counts[gene * l..(gene + 1) * l]
    }

    pub fn is_paired(&self) -> bool {
        self.subject.is_some()
    }

    /// −1 for treatment 1, +1 for treatment 2: the coefficient of Δ in log λ.
    #[inline]
    pub fn sign(&self, library: usize) -> T {
        if self.treatment[library] == 1 {
            -T::one()
        } else {
            T::one()
        }
    }
}

/// Partitions the matrix into one block per chromosome, in order of first
/// appearance; genes inside a block are ordered by position.
pub fn split_by_chromosome<T: Real>(cm: &CountMatrix, rho: &[T]) -> Result<Vec<ChromosomeBlock<T>>> {
    if rho.len() != cm.n_libraries() {
        return Err(Error::Ingest(format!(
            "rho has {} entries for {} libraries",
            rho.len(),
            cm.n_libraries()
        )));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut members: HashMap<&str, Vec<usize>> = HashMap::new();
    for (g, meta) in cm.genes().iter().enumerate() {
        members
            .entry(meta.chromosome.as_str())
            .or_insert_with(|| {
                order.push(meta.chromosome.as_str());
                Vec::new()
            })
            .push(g);
    }
    let treatment: Vec<u8> = cm.libraries().iter().map(|l| l.treatment).collect();
    let subject = if cm.is_paired() {
        let mut dense: Vec<u32> = Vec::new();
        let idx = cm
            .libraries()
            .iter()
            .map(|l| {
                let s = l.subject.unwrap();
                match dense.iter().position(|&d| d == s) {
                    Some(p) => p,
                    None => {
                        dense.push(s);
                        dense.len() - 1
                    }
                }
            })
            .collect::<Vec<_>>();
        Some(idx)
    } else {
        None
    };

    order
        .into_iter()
        .map(|chrom| {
            let mut rows = members.remove(chrom).unwrap();
            rows.sort_by_key(|&g| cm.genes()[g].position);
            let mut counts = Vec::with_capacity(rows.len() * cm.n_libraries());
            for &g in &rows {
                counts.extend_from_slice(cm.row(g));
            }
            let mut block =
                ChromosomeBlock::new(chrom, counts, treatment.clone(), rho.to_vec(), subject.clone())?;
            block.gene_ids = rows.iter().map(|&g| cm.genes()[g].id.clone()).collect();
            block.positions = rows.iter().map(|&g| cm.genes()[g].position).collect();
            Ok(block)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout4() -> Layout {
        Layout::from_toml_str(
            r#"
[library.a1]
treatment = 1
replicate = 1
[library.a2]
treatment = 1
replicate = 2
[library.b1]
treatment = 2
replicate = 1
[library.b2]
treatment = 2
replicate = 2
"#,
        )
        .unwrap()
    }

    fn parse(text: &str) -> Result<CountMatrix> {
        read_counts(
            text.as_bytes(),
            &CountFormat {
                delimiter: Delimiter::Auto,
                layout: layout4(),
            },
        )
    }

    fn matrix(rows: &[(&str, &str, i64, [u64; 4])]) -> CountMatrix {
        let genes = rows
            .iter()
            .map(|(id, c, p, _)| GeneMeta {
                id: id.to_string(),
                chromosome: c.to_string(),
                position: *p,
            })
            .collect();
        let libs = ["a1", "a2", "b1", "b2"]
            .iter()
            .map(|n| layout4().resolve(n).unwrap())
            .collect();
        let counts = rows.iter().flat_map(|r| r.3).collect();
        CountMatrix::new(genes, libs, counts).unwrap()
    }

    #[test]
    fn parses_well_formed_file() {
        let cm = parse(
            "gene_id\tchromosome\tposition\ta1\ta2\tb1\tb2\n\
             g1\t1\t10\t1\t2\t3\t4\n\
             g2\t1\t20\t0\t0\t5\t5\n\
             g3\t2\t5\t7\t7\t7\t7\n",
        )
        .unwrap();
        assert_eq!((cm.n_genes(), cm.n_libraries()), (3, 4));
        assert_eq!(cm.row(0), &[1, 2, 3, 4]);
        assert_eq!(cm.genes()[2].chromosome, "2");
        assert_eq!(cm.libraries()[2].treatment, 2);
    }

    #[test]
    fn comma_delimited_with_comments() {
        let cm = parse("# generated\ngene_id,chromosome,position,a1,a2,b1,b2\ng1,X,1,1,1,1,1\n").unwrap();
        assert_eq!(cm.n_genes(), 1);
    }

    #[test]
    fn negative_count_reports_line() {
        let err = parse("gene_id,chromosome,position,a1,a2,b1,b2\ng1,1,1,1,1,1,1\ng2,1,2,-1,1,1,1\n")
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("negative count") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn non_integer_and_wrong_width() {
        let e = parse("gene_id,chromosome,position,a1,a2,b1,b2\ng1,1,1,1.5,1,1,1\n").unwrap_err();
        assert!(e.to_string().contains("non-integer"));
        let e = parse("gene_id,chromosome,position,a1,a2,b1,b2\ng1,1,1,1,1,1\n").unwrap_err();
        assert!(e.to_string().contains("line 2") && e.to_string().contains("columns"));
    }

    #[test]
    fn duplicate_gene_id_is_named() {
        let e = parse("gene_id,chromosome,position,a1,a2,b1,b2\ndup,1,1,1,1,1,1\ndup,1,2,1,1,1,1\n")
            .unwrap_err();
        assert!(e.to_string().contains("dup"));
    }

    #[test]
    fn positions_must_increase_within_chromosome() {
        let e = parse("gene_id,chromosome,position,a1,a2,b1,b2\nx,1,5,1,1,1,1\ny,1,5,1,1,1,1\n")
            .unwrap_err();
        assert!(e.to_string().contains("does not increase"));
    }

    #[test]
    fn unknown_library_rejected() {
        let e = parse("gene_id,chromosome,position,zz\ng,1,1,1\n").unwrap_err();
        assert!(e.to_string().contains("zz"));
    }

    #[test]
    fn paired_layout_requires_each_subject_once_per_treatment() {
        let mut libs: Vec<LibraryMeta> = ["a1", "a2", "b1", "b2"]
            .iter()
            .map(|n| layout4().resolve(n).unwrap())
            .collect();
        for (l, s) in libs.iter_mut().zip([1, 2, 1, 2]) {
            l.subject = Some(s);
        }
        assert!(validate_libraries(&libs).is_ok());
        libs[3].subject = Some(1);
        assert!(validate_libraries(&libs).is_err());
    }

    #[test]
    fn filter_boundary() {
        let cm = matrix(&[
            ("nine", "1", 1, [2, 2, 2, 3]),
            ("ten", "1", 2, [2, 2, 3, 3]),
        ]);
        let f = filter_low_counts(&cm, 10);
        assert_eq!(f.genes().len(), 1);
        assert_eq!(f.genes()[0].id, "ten");
        assert_eq!(filter_low_counts(&cm, 0), cm);
    }

    #[test]
    fn uq_identical_libraries_are_zero() {
        let cm = matrix(&[
            ("g1", "1", 1, [3, 3, 3, 3]),
            ("g2", "1", 2, [8, 8, 8, 8]),
            ("g3", "1", 3, [1, 1, 1, 1]),
        ]);
        let rho: Vec<f64> = upper_quartile_effects(&cm).unwrap();
        assert!(rho.iter().all(|r| r.abs() < 1e-15));
    }

    #[test]
    fn uq_doubled_library_differs_by_log2() {
        let cm = matrix(&[
            ("g1", "1", 1, [3, 6, 3, 3]),
            ("g2", "1", 2, [8, 16, 8, 8]),
            ("g3", "1", 3, [1, 2, 1, 1]),
            ("g4", "1", 4, [0, 0, 5, 5]),
        ]);
        let rho: Vec<f64> = upper_quartile_effects(&cm).unwrap();
        assert!((rho[1] - rho[0] - 2f64.ln()).abs() < 1e-12);
        assert!(rho.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn uq_single_library_and_zero_library() {
        let libs = vec![LibraryMeta {
            name: "only".into(),
            treatment: 1,
            replicate: 1,
            subject: None,
        }];
        let genes = vec![GeneMeta {
            id: "g".into(),
            chromosome: "1".into(),
            position: 1,
        }];
        let cm = CountMatrix::new(genes.clone(), libs.clone(), vec![17]).unwrap();
        assert_eq!(upper_quartile_effects::<f64>(&cm).unwrap(), vec![0.0]);
        let cm0 = CountMatrix::new(genes, libs, vec![0]).unwrap();
        assert!(upper_quartile_effects::<f64>(&cm0).is_err());
    }

    #[test]
    fn split_blocks() {
        let cm = matrix(&[
            ("g1", "1", 1, [1, 1, 1, 1]),
            ("g2", "1", 2, [2, 2, 2, 2]),
            ("g3", "2", 1, [3, 3, 3, 3]),
        ]);
        let blocks = split_by_chromosome(&cm, &[0.0f64; 4]).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].n_genes(), 2);
        assert_eq!(blocks[1].n_genes(), 1);
        assert_eq!(blocks[1].row(0), &[3, 3, 3, 3]);
        let back: Vec<String> = blocks.iter().flat_map(|b| b.gene_ids.clone()).collect();
        let orig: Vec<String> = cm.genes().iter().map(|g| g.id.clone()).collect();
        assert_eq!(back, orig);
        assert!(split_by_chromosome(&cm, &[0.0f64; 3]).is_err());

        let single = matrix(&[("a", "7", 1, [1, 2, 3, 4]), ("b", "7", 9, [4, 3, 2, 1])]);
        let blocks = split_by_chromosome(&single, &[0.0f64; 4]).unwrap();
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].counts, vec![1, 2, 3, 4, 4, 3, 2, 1]);
    }

    #[test]
    fn write_then_read_roundtrip() {
        let cm = matrix(&[("g1", "1", 1, [1, 0, 9, 4]), ("g2", "2", 3, [5, 5, 5, 5])]);
        let mut buf = Vec::new();
        cm.write_tsv(&mut buf, &["meta".into()]).unwrap();
        let back = parse(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, cm);
    }

    fn arb_matrix() -> impl Strategy<Value = CountMatrix> {
        (1usize..30, 1usize..4).prop_flat_map(|(n, n_chrom)| {
            (
                proptest::collection::vec(0u64..40, n * 4),
                proptest::collection::vec(0..n_chrom, n),
            )
                .prop_map(move |(counts, chroms)| {
                    let genes = chroms
                        .iter()
                        .enumerate()
                        .map(|(i, c)| GeneMeta {
                            id: format!("g{i}"),
                            chromosome: format!("c{c}"),
                            position: i as i64,
                        })
                        .collect();
                    let libs = ["a1", "a2", "b1", "b2"]
                        .iter()
                        .map(|n| layout4().resolve(n).unwrap())
                        .collect();
                    CountMatrix::new(genes, libs, counts).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn filter_idempotent_and_monotone(cm in arb_matrix(), a in 0u64..60, b in 0u64..60) {
            let (lo, hi) = (a.min(b), a.max(b));
            let once = filter_low_counts(&cm, lo);
            prop_assert_eq!(&filter_low_counts(&once, lo), &once);
            let strict = filter_low_counts(&cm, hi);
            let kept: HashSet<_> = once.genes().iter().map(|g| &g.id).collect();
            prop_assert!(strict.genes().iter().all(|g| kept.contains(&g.id)));
        }

        #[test]
        fn uq_centered_and_ignores_zero_rows(cm in arb_matrix()) {
            if let Ok(rho) = upper_quartile_effects::<f64>(&cm) {
                prop_assert!(rho.iter().sum::<f64>().abs() < 1e-12);
                let mut genes = cm.genes().to_vec();
                genes.push(GeneMeta { id: "zero".into(), chromosome: "zz".into(), position: 0 });
                let mut counts = cm.counts.clone();
                counts.extend([0; 4]);
                let padded = CountMatrix::new(genes, cm.libraries().to_vec(), counts).unwrap();
                let rho2 = upper_quartile_effects::<f64>(&padded).unwrap();
                for (x, y) in rho.iter().zip(&rho2) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn split_partitions_genes(cm in arb_matrix()) {
            let blocks = split_by_chromosome(&cm, &[0.0f64; 4]).unwrap();
            let mut ids: Vec<String> = blocks.iter().flat_map(|b| b.gene_ids.clone()).collect();
            prop_assert_eq!(ids.len(), cm.n_genes());
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), cm.n_genes());
            for b in &blocks {
                prop_assert!(b.positions.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
