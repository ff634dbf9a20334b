use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod meta;
mod plot;

#[derive(Parser, Debug)]
#[command(name = "hmmseq", version, about = "Bayesian HMM differential expression calling for RNA-seq counts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML file with [run], [sampler] and [simulate] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(0..=i64::MAX as u64))]
    pub seed: Option<u64>,
    /// Worker threads for per-chromosome parallelism.
    #[arg(long, global = true, env = "HMMSEQ_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ChainArgs {
    /// Count table (tab or comma delimited).
    #[arg(long)]
    pub input: PathBuf,
    /// Library map: [library.<name>] treatment, replicate, subject.
    #[arg(long)]
    pub layout: PathBuf,
    /// Fit subject random effects (needs subjects in the layout).
    #[arg(long)]
    pub paired: bool,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    /// Drop genes whose total count is below this.
    #[arg(long)]
    pub filter: Option<u64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum NoiseArg {
    Poisson,
    Negbin,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a count table with known DE states.
    Simulate {
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Generating model for (beta, delta): FF, FH, HF or HH.
        #[arg(long)]
        model: Option<String>,
        #[arg(long, value_enum)]
        noise: Option<NoiseArg>,
        /// Add subject effects shared across treatments.
        #[arg(long)]
        paired: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Run the sampler and write retained draws.
    Fit {
        #[command(flatten)]
        chain: ChainArgs,
        /// FF, FH, HF, HH, or auto to choose by DIC.
        #[arg(long)]
        model: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Turn retained draws into posterior DE probabilities and calls.
    Detect {
        /// Samples file written by `fit`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        q0: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit all four models and report DIC.
    Select {
        #[command(flatten)]
        chain: ChainArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Score a detection table against simulated truth.
    Eval {
        /// Detection table written by `detect`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Extra call lists for overlap counting, as NAME=PATH.
        #[arg(long = "calls")]
        calls: Vec<String>,
        #[arg(long)]
        q0: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Geometric gap test for spatial clustering of DE calls.
    SpatialTest {
        /// Detection table written by `detect`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        min_gaps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate { preset, model, noise, paired, common } => commands::simulate(&common, preset, model, noise, paired),
        Command::Fit { chain, model, common } => commands::fit(&common, &chain, model),
        Command::Detect { input, q0, common } => commands::detect(&common, &input, q0),
        Command::Select { chain, common } => commands::select(&common, &chain),
        Command::Eval { input, truth, calls, q0, common } => commands::eval(&common, &input, &truth, &calls, q0),
        Command::SpatialTest { input, min_gaps, common } => commands::spatial_test(&common, &input, min_gaps),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("hmmseq: {}", msg.join(": "));
            ExitCode::FAILURE
        }
    }
}
