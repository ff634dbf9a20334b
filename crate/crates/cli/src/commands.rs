use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use hmmseq_core::detect::{call_de, posterior_de_prob, read_detection_tsv, write_detection_tsv, PosteriorSummary};
use hmmseq_core::eval::{fdr_calibration, observed_fdr, overlap_counts, roc_curve, spatial_geometric_test};
use hmmseq_core::ingest::{
    filter_low_counts, load_counts, split_by_chromosome, upper_quartile_effects, ChromosomeBlock, CountFormat, CountMatrix,
    Layout,
};
use hmmseq_core::modelsel::dic_select_with_chains;
use hmmseq_core::sampler::{estimate_sigma_eps, fit_blocks, read_samples_tsv, write_samples_tsv, ChainSamples, ModelChoice, SamplerConfig};
use hmmseq_core::simulate::{read_truth_tsv, simulate as run_simulation, write_truth_tsv, Noise};

use crate::config::{sampler_config, sim_spec, ConfigFile, Effective};
use crate::meta::{header_lines, header_table, OutDir, VERSION};
use crate::plot::unit_square_plot;
use crate::{ChainArgs, Common, NoiseArg, Preset};

const DEFAULT_Q0: f64 = 0.05;
const DEFAULT_FILTER: u64 = 10;
const DEFAULT_MIN_GAPS: usize = 20;
/// Subject-effect variance used by `simulate --paired` when none is configured.
const DEFAULT_SIM_SIGMA_EPS2: f64 = 0.1;
const DEFAULT_NB_GAMMA: (f64, f64) = (2.0, 0.1);

fn init_threads(common: &Common, file: &ConfigFile) -> Result<()> {
    if let Some(n) = common.threads.or(file.run.threads) {
        if n == 0 {
            bail!("cli: --threads must be at least 1");
        }
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("io: cannot open {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn check_q0(q0: f64) -> Result<f64> {
    if !(q0 > 0.0 && q0 < 1.0) {
        bail!("cli: q0 must lie in (0, 1), got {q0}");
    }
    Ok(q0)
}

fn toml_text(table: &toml::Table) -> String {
    toml::to_string(table).expect("table serializes")
}

fn to_value<T: serde::Serialize>(v: &T) -> toml::Value {
    toml::Value::try_from(v).expect("value serializes")
}

pub fn simulate(common: &Common, preset: Option<Preset>, model: Option<String>, noise: Option<NoiseArg>, paired: bool) -> Result<()> {
    let file = ConfigFile::load(common.config.as_deref())?;
    init_threads(common, &file)?;
    let preset = preset.map(|p| match p {
        Preset::Desk => "desk",
        Preset::Full => "full",
    });
    let mut spec = sim_spec(&file, preset)?;
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    if let Some(m) = model {
        spec.model = m.parse()?;
    }
    match noise {
        Some(NoiseArg::Poisson) => spec.noise = Noise::Poisson,
        Some(NoiseArg::Negbin) if spec.noise == Noise::Poisson => {
            let (shape, scale) = DEFAULT_NB_GAMMA;
            spec.noise = Noise::NegBinomial { shape, scale };
        }
        _ => {}
    }
    if paired && spec.sigma_eps2 == 0.0 {
        spec.sigma_eps2 = DEFAULT_SIM_SIGMA_EPS2;
    }
    let (cm, truth) = run_simulation(&spec)?;

    let eff = Effective {
        command: "simulate",
        tool_version: VERSION,
        model: None,
        q0: None,
        paired: None,
        filter_threshold: None,
        min_gaps: None,
        sampler: None,
        simulate: Some(&spec),
    };
    let head = header_lines(&eff, Some(spec.seed));
    let out = OutDir::create(&common.out_dir)?;
    out.write_with("counts.tsv", |w| cm.write_tsv(w, &head))?;
    out.write_with("truth.tsv", |w| write_truth_tsv(w, &truth, &head))?;
    let layout: String = head.iter().map(|h| format!("# {h}\n")).collect::<String>() + &Layout::of(&cm).to_toml_string();
    out.write("layout.toml", layout)?;

    let mut meta = toml::Table::new();
    meta.insert("meta".into(), header_table(&eff, Some(spec.seed)).into());
    meta.insert("genes".into(), (cm.n_genes() as i64).into());
    meta.insert("libraries".into(), (cm.n_libraries() as i64).into());
    meta.insert("de_genes".into(), (truth.de.iter().filter(|&&d| d).count() as i64).into());
    meta.insert("simulate".into(), to_value(&spec));
    out.write("run_meta.toml", toml_text(&meta))?;
    Ok(())
}

struct Prepared {
    cm: CountMatrix,
    genes_in: usize,
    rho: Vec<f64>,
    blocks: Vec<ChromosomeBlock<f64>>,
    cfg: SamplerConfig<f64>,
    paired: bool,
    filter: u64,
}

fn prepare(common: &Common, chain: &ChainArgs, file: &ConfigFile) -> Result<Prepared> {
    let mut cfg = sampler_config(file)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = chain.iters {
        cfg.iterations = n;
        if chain.burnin.is_none() && !file.sampler.contains_key("burn_in") {
            cfg.burn_in = n / 2;
        }
    }
    if let Some(b) = chain.burnin {
        cfg.burn_in = b;
    }
    if let Some(t) = chain.thin {
        cfg.thin = t;
    }
    cfg.validate()?;

    let layout = Layout::load(&chain.layout).context("ingest: layout")?;
    let raw = load_counts(&chain.input, &CountFormat { layout, ..Default::default() })
        .context("ingest: counts")?;
    let filter = chain.filter.or(file.run.filter_threshold).unwrap_or(DEFAULT_FILTER);
    let cm = filter_low_counts(&raw, filter);
    if cm.n_genes() == 0 {
        bail!("ingest: no genes left after filtering at total count {filter}");
    }
    let rho = upper_quartile_effects::<f64>(&cm)?;
    let paired = chain.paired || file.run.paired.unwrap_or(false);
    if paired {
        if !cm.is_paired() {
            bail!("ingest: --paired needs a subject for every library in the layout");
        }
        if !file.sampler.contains_key("sigma_eps2") {
            cfg.sigma_eps2 = estimate_sigma_eps(&cm, &rho)?;
        }
    } else {
        cfg.sigma_eps2 = 0.0;
    }
    let blocks = split_by_chromosome(&cm, &rho)?;
    Ok(Prepared {
        genes_in: raw.n_genes(),
        cm,
        rho,
        blocks,
        cfg,
        paired,
        filter,
    })
}

fn diagnostics(chains: &[ChainSamples<f64>]) -> toml::Table {
    let mut t = toml::Table::new();
    for ch in chains {
        let mut c = toml::Table::new();
        c.insert("genes".into(), (ch.n_genes() as i64).into());
        c.insert("retained".into(), (ch.n_samples() as i64).into());
        let acc = &ch.acceptance;
        for (k, v) in [("acceptance_delta", acc.mean_delta()), ("acceptance_beta", acc.mean_beta()), ("acceptance_eps", acc.mean_eps())] {
            if let Some(v) = v {
                c.insert(k.into(), v.into());
            }
        }
        if let (Some(first), Some(last)) = (ch.loglik.first(), ch.loglik.last()) {
            c.insert("loglik_first".into(), (*first).into());
            c.insert("loglik_last".into(), (*last).into());
        }
        t.insert(ch.chromosome.clone(), c.into());
    }
    t
}

fn write_traces(out: &OutDir, chains: &[ChainSamples<f64>], head: &[String]) -> Result<()> {
    out.write_with("trace.tsv", |w| {
        for h in head {
            writeln!(w, "# {h}")?;
        }
        writeln!(w, "chromosome\titeration\tloglik")?;
        for ch in chains {
            for (i, ll) in ch.loglik.iter().enumerate() {
                writeln!(w, "{}\t{}\t{}", ch.chromosome, i + 1, ll)?;
            }
        }
        Ok(())
    })?;
    out.write_with("hyper.tsv", |w| {
        for h in head {
            writeln!(w, "# {h}")?;
        }
        writeln!(w, "chromosome\titeration\tmu1\tmu2\tsigma2_1\tsigma2_2\tphi1\tphi3\ttau2_1\ttau2_2\ttau2_3")?;
        for ch in chains {
            for (it, hp) in ch.iterations.iter().zip(&ch.hyper) {
                writeln!(
                    w,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    ch.chromosome, it, hp.mu.0, hp.mu.1, hp.sigma2.0, hp.sigma2.1, hp.phi.0, hp.phi.1, hp.tau2.0, hp.tau2.1, hp.tau2.2
                )?;
            }
        }
        Ok(())
    })?;
    Ok(())
}

fn dic_table(report: &hmmseq_core::modelsel::DicReport<f64>, eff: &Effective<'_>, seed: u64) -> Result<String> {
    let mut t: toml::Table = toml::from_str(&report.to_toml_string()).context("modelsel: report")?;
    t.insert("meta".into(), header_table(eff, Some(seed)).into());
    Ok(toml_text(&t))
}

pub fn fit(common: &Common, chain: &ChainArgs, model: Option<String>) -> Result<()> {
    let file = ConfigFile::load(common.config.as_deref())?;
    init_threads(common, &file)?;
    let p = prepare(common, chain, &file)?;
    let model_name = model.or(file.run.model.clone()).unwrap_or_else(|| "HH".into());
    let auto = model_name.eq_ignore_ascii_case("auto");
    let eff = Effective {
        command: "fit",
        tool_version: VERSION,
        model: Some(if auto { "auto".into() } else { model_name.to_ascii_uppercase() }),
        q0: None,
        paired: Some(p.paired),
        filter_threshold: Some(p.filter),
        min_gaps: None,
        sampler: Some(&p.cfg),
        simulate: None,
    };
    let head = header_lines(&eff, Some(p.cfg.seed));
    let out = OutDir::create(&common.out_dir)?;

    let (chosen, chains) = if auto {
        let (report, mut all) = dic_select_with_chains(&p.blocks, &p.cfg)?;
        out.write("dic.toml", dic_table(&report, &eff, p.cfg.seed)?)?;
        let chains = all.remove(&report.selected).expect("selected model was fitted");
        (report.selected, chains)
    } else {
        let m: ModelChoice = model_name.parse()?;
        (m, fit_blocks(&p.blocks, m, &p.cfg)?)
    };

    out.write_with("samples.tsv", |w| write_samples_tsv(w, &chains, &head))?;
    write_traces(&out, &chains, &head)?;

    let mut meta = toml::Table::new();
    meta.insert("meta".into(), header_table(&eff, Some(p.cfg.seed)).into());
    meta.insert("model".into(), chosen.to_string().into());
    meta.insert("genes_in".into(), (p.genes_in as i64).into());
    meta.insert("genes_kept".into(), (p.cm.n_genes() as i64).into());
    meta.insert("sigma_eps2".into(), p.cfg.sigma_eps2.into());
    meta.insert("rho".into(), to_value(&p.rho));
    meta.insert("chromosome".into(), diagnostics(&chains).into());
    meta.insert("sampler".into(), to_value(&p.cfg));
    out.write("run_meta.toml", toml_text(&meta))?;
    Ok(())
}

pub fn select(common: &Common, chain: &ChainArgs) -> Result<()> {
    let file = ConfigFile::load(common.config.as_deref())?;
    init_threads(common, &file)?;
    let p = prepare(common, chain, &file)?;
    let eff = Effective {
        command: "select",
        tool_version: VERSION,
        model: Some("auto".into()),
        q0: None,
        paired: Some(p.paired),
        filter_threshold: Some(p.filter),
        min_gaps: None,
        sampler: Some(&p.cfg),
        simulate: None,
    };
    let (report, _) = dic_select_with_chains(&p.blocks, &p.cfg)?;
    let out = OutDir::create(&common.out_dir)?;
    out.write("dic.toml", dic_table(&report, &eff, p.cfg.seed)?)?;
    Ok(())
}

pub fn detect(common: &Common, input: &Path, q0: Option<f64>) -> Result<()> {
    let file = ConfigFile::load(common.config.as_deref())?;
    let q0 = check_q0(q0.or(file.run.q0).unwrap_or(DEFAULT_Q0))?;
    let chains = read_samples_tsv::<f64, _>(open(input)?).with_context(|| format!("sampler: samples file {}", input.display()))?;
    let summary = posterior_de_prob(&chains)?;
    let result = call_de(&summary, q0)?;
    let eff = Effective {
        command: "detect",
        tool_version: VERSION,
        model: chains.first().map(|c| c.model.to_string()),
        q0: Some(q0),
        paired: None,
        filter_threshold: None,
        min_gaps: None,
        sampler: None,
        simulate: None,
    };
    let head = header_lines(&eff, None);
    let out = OutDir::create(&common.out_dir)?;
    out.write_with("detect.tsv", |w| write_detection_tsv(w, &summary, &result, &head))?;
    out.write_with("calls.txt", |w| {
        for h in &head {
            writeln!(w, "# {h}")?;
        }
        for &g in &result.called {
            writeln!(w, "{}", summary.genes[g].id)?;
        }
        Ok(())
    })?;
    let mut meta = toml::Table::new();
    meta.insert("meta".into(), header_table(&eff, None).into());
    meta.insert("genes".into(), (summary.genes.len() as i64).into());
    meta.insert("called".into(), (result.called.len() as i64).into());
    if let Some(&d) = result.called.len().checked_sub(1).as_ref() {
        meta.insert("expected_fdr".into(), result.fdr_path[d].into());
    } else {
        meta.insert("expected_fdr".into(), 0.0.into());
    }
    out.write("detect_meta.toml", toml_text(&meta))?;
    Ok(())
}

fn read_id_list(path: &Path) -> Result<BTreeSet<String>> {
    let mut ids = BTreeSet::new();
    for line in open(path)?.lines() {
        let line = line.with_context(|| format!("io: {}", path.display()))?;
        let t = line.trim();
        if !t.is_empty() && !t.starts_with('#') {
            ids.insert(t.to_string());
        }
    }
    Ok(ids)
}

fn load_detection(input: &Path) -> Result<(PosteriorSummary<f64>, Vec<bool>)> {
    read_detection_tsv::<f64, _>(open(input)?).with_context(|| format!("detect: detection table {}", input.display()))
}

pub fn eval(common: &Common, input: &Path, truth_path: &Path, extra: &[String], q0: Option<f64>) -> Result<()> {
    let file = ConfigFile::load(common.config.as_deref())?;
    let (summary, called) = load_detection(input)?;
    let truth = read_truth_tsv(open(truth_path)?).with_context(|| format!("simulate: truth file {}", truth_path.display()))?;
    let by_id: BTreeMap<&str, bool> = truth.gene_ids.iter().map(String::as_str).zip(truth.de.iter().copied()).collect();
    let de: Vec<bool> = summary
        .genes
        .iter()
        .map(|g| by_id.get(g.id.as_str()).copied().ok_or_else(|| anyhow!("eval: gene {} is missing from the truth file", g.id)))
        .collect::<Result<_>>()?;

    let roc = roc_curve(&summary.p_de, &de)?;
    let grid: Vec<f64> = (1..=50).map(|k| k as f64 / 100.0).collect();
    let calib = fdr_calibration(&summary.p_de, &de, &grid)?;
    let called_idx: Vec<usize> = (0..called.len()).filter(|&g| called[g]).collect();

    let mut sets = vec![
        ("hmmseq".to_string(), called_idx.iter().map(|&g| summary.genes[g].id.clone()).collect::<BTreeSet<_>>()),
        ("truth".to_string(), (0..de.len()).filter(|&g| de[g]).map(|g| summary.genes[g].id.clone()).collect()),
    ];
    for spec in extra {
        let (name, path) = spec.split_once('=').ok_or_else(|| anyhow!("cli: --calls expects NAME=PATH, got {spec:?}"))?;
        sets.push((name.to_string(), read_id_list(Path::new(path))?));
    }
    let overlap = overlap_counts(&sets)?;

    let q0 = q0.or(file.run.q0).map(check_q0).transpose()?;
    let eff = Effective {
        command: "eval",
        tool_version: VERSION,
        model: None,
        q0,
        paired: None,
        filter_threshold: None,
        min_gaps: None,
        sampler: None,
        simulate: None,
    };
    let head = header_lines(&eff, None);
    let out = OutDir::create(&common.out_dir)?;
    out.write_with("roc.tsv", |w| {
        for h in &head {
            writeln!(w, "# {h}")?;
        }
        writeln!(w, "fpr\ttpr")?;
        for (x, y) in &roc.points {
            writeln!(w, "{x}\t{y}")?;
        }
        Ok(())
    })?;
    out.write_with("fdr_calibration.tsv", |w| {
        for h in &head {
            writeln!(w, "# {h}")?;
        }
        writeln!(w, "nominal\tobserved")?;
        for (x, y) in &calib {
            writeln!(w, "{x}\t{y}")?;
        }
        Ok(())
    })?;
    out.write_with("overlap.tsv", |w| {
        for h in &head {
            writeln!(w, "# {h}")?;
        }
        writeln!(w, "region\tcount")?;
        for (k, v) in &overlap {
            writeln!(w, "{}\t{v}", k.join("&"))?;
        }
        Ok(())
    })?;
    out.write("roc.svg", unit_square_plot(&format!("ROC (AUC = {:.3})", roc.auc), "false positive rate", "true positive rate", &[("hmmseq", &roc.points)]))?;
    let scale = 2.0;
    let calib_pts: Vec<(f64, f64)> = calib.iter().map(|&(x, y)| (x * scale, y * scale)).collect();
    out.write(
        "fdr_calibration.svg",
        unit_square_plot("FDR calibration (axes 0 to 0.5)", "nominal FDR", "observed FDR", &[("hmmseq", &calib_pts)]),
    )?;

    let mut meta = toml::Table::new();
    meta.insert("meta".into(), header_table(&eff, None).into());
    meta.insert("auc".into(), roc.auc.into());
    meta.insert("genes".into(), (de.len() as i64).into());
    meta.insert("true_de".into(), (de.iter().filter(|&&d| d).count() as i64).into());
    meta.insert("called".into(), (called_idx.len() as i64).into());
    meta.insert("observed_fdr".into(), observed_fdr::<f64>(&called_idx, &de).into());
    let tp = called_idx.iter().filter(|&&g| de[g]).count();
    let pos = de.iter().filter(|&&d| d).count().max(1);
    meta.insert("tpr".into(), (tp as f64 / pos as f64).into());
    if let Some(q) = q0 {
        let r = fdr_calibration(&summary.p_de, &de, &[q])?;
        meta.insert("observed_fdr_at_q0".into(), r[0].1.into());
    }
    out.write("eval.toml", toml_text(&meta))?;
    Ok(())
}

pub fn spatial_test(common: &Common, input: &Path, min_gaps: Option<usize>) -> Result<()> {
    let file = ConfigFile::load(common.config.as_deref())?;
    let min_gaps = min_gaps.or(file.run.min_gaps).unwrap_or(DEFAULT_MIN_GAPS);
    let (summary, called) = load_detection(input)?;
    let mut per_chrom: Vec<(String, Vec<(i64, bool)>)> = Vec::new();
    for (g, gene) in summary.genes.iter().enumerate() {
        match per_chrom.iter_mut().find(|(c, _)| *c == gene.chromosome) {
            Some((_, v)) => v.push((gene.position, called[g])),
            None => per_chrom.push((gene.chromosome.clone(), vec![(gene.position, called[g])])),
        }
    }
    let calls: Vec<Vec<bool>> = per_chrom
        .into_iter()
        .map(|(_, mut v)| {
            v.sort_by_key(|x| x.0);
            v.into_iter().map(|x| x.1).collect()
        })
        .collect();
    let test = spatial_geometric_test(&calls, min_gaps)?;
    let eff = Effective {
        command: "spatial-test",
        tool_version: VERSION,
        model: None,
        q0: None,
        paired: None,
        filter_threshold: None,
        min_gaps: Some(min_gaps),
        sampler: None,
        simulate: None,
    };
    let out = OutDir::create(&common.out_dir)?;
    let mut t = toml::Table::new();
    t.insert("meta".into(), header_table(&eff, None).into());
    t.insert("n_gaps".into(), (test.n_gaps as i64).into());
    t.insert("p_hat".into(), test.p_hat.into());
    t.insert("statistic".into(), test.statistic.into());
    t.insert("df".into(), (test.df as i64).into());
    t.insert("p_value".into(), test.p_value.into());
    let cells: Vec<toml::Value> = test
        .cells
        .iter()
        .map(|c| {
            let mut r = toml::Table::new();
            r.insert("lo".into(), (c.lo as i64).into());
            if let Some(h) = c.hi {
                r.insert("hi".into(), (h as i64).into());
            }
            r.insert("observed".into(), (c.observed as i64).into());
            r.insert("expected".into(), c.expected.into());
            r.into()
        })
        .collect();
    t.insert("cell".into(), cells.into());
    out.write("spatial.toml", toml_text(&t))?;
    Ok(())
}
