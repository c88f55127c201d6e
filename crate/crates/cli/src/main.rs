//! `fairsurvey`: survey-design experiments from the command line.
//!
//! Settings come from an optional TOML config (`--config`); flags override
//! it. Exit status is 0 when everything succeeded, 2 when some cells or grid
//! points failed but the rest were written, and 1 on a hard error.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fairsurvey::allocator::Method;
use fairsurvey::experiment::{AblationParam, ExperimentConfig};
use fairsurvey::par::Execution;
use fairsurvey::privacy::Epsilon;

#[derive(Debug, Parser)]
#[command(name = "fairsurvey", version, about = "Fair two-phase survey design with differentially private counts")]
struct Cli {
    /// TOML experiment config. Relative input paths in it resolve against
    /// its directory.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Flags that override config values.
#[derive(Debug, Args)]
struct Overrides {
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Survey replications per cell.
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    /// Privacy levels, comma separated; `inf` disables noise.
    #[arg(long = "epsilon", global = true, value_delimiter = ',', value_name = "EPS")]
    epsilons: Vec<Epsilon>,
    /// Allocation methods, comma separated.
    #[arg(long = "method", global = true, value_delimiter = ',', value_name = "METHOD")]
    methods: Vec<Method>,
    /// Repartition the population into regions of this many individuals.
    #[arg(long, global = true)]
    region_size: Option<u64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Confidence width as a fraction of each group's prior mean.
    #[arg(long, global = true)]
    gamma_fraction: Option<f64>,
    #[arg(long, global = true)]
    f1: Option<f64>,
    #[arg(long, global = true)]
    f2: Option<f64>,
    #[arg(long, global = true)]
    c1: Option<f64>,
    #[arg(long, global = true)]
    c2: Option<f64>,
    /// Phase-2 sampling rate within a visited region.
    #[arg(long, global = true)]
    g: Option<f64>,
    /// Run Monte Carlo work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic prior and truth microdata.
    Generate,
    /// Privatize the region-by-group counts of a population.
    Privatize {
        /// Microdata CSV (`region_id,group_id,value,weight`).
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Output counts CSV; defaults to `<output-dir>/counts.csv`.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Measure estimator variance on prior data and fit `a/x` proxies.
    FitProxy {
        /// Prior-year microdata CSV.
        #[arg(long, value_name = "FILE")]
        prior: PathBuf,
        /// Output curves CSV; defaults to `<output-dir>/curves.csv`.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Allocate a survey for each requested method.
    Optimize {
        /// Counts CSV (exact or privatized).
        #[arg(long, value_name = "FILE")]
        counts: PathBuf,
        /// Proxy curves CSV from `fit-proxy`.
        #[arg(long, value_name = "FILE")]
        curves: PathBuf,
        /// Prior-year microdata the curves were fitted on, for the group
        /// sizes and the means behind the confidence widths.
        #[arg(long, value_name = "FILE")]
        prior: PathBuf,
    },
    /// Replicate a survey allocation on a population.
    Simulate {
        /// Ground-truth microdata CSV.
        #[arg(long, value_name = "FILE")]
        truth: PathBuf,
        /// Allocation JSON from `optimize` or `run`.
        #[arg(long, value_name = "FILE")]
        allocation: PathBuf,
        /// Prior-year microdata for the confidence widths; defaults to the
        /// truth.
        #[arg(long, value_name = "FILE")]
        prior: Option<PathBuf>,
    },
    /// Run every (ε, method) cell of the config.
    Run,
    /// Optimal two-phase cost across a grid of one design parameter.
    Ablate {
        /// One of f1, f2, c2, alpha, gamma.
        #[arg(long)]
        param: AblationParam,
        /// Comma-separated parameter values.
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        grid: Vec<f64>,
    },
    /// Repeat the run with regions of each size.
    Sparsity {
        /// Comma-separated region sizes, in individuals.
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        sizes: Vec<u64>,
    },
}

/// How a command ended when it did not hit a hard error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Complete,
    /// Some cells or grid points failed; the rest were written.
    Partial(usize),
}

/// Effective settings after merging the config file and flags.
pub struct Settings {
    pub config: ExperimentConfig,
    /// Directory that relative paths in the config resolve against.
    pub base_dir: PathBuf,
    pub exec: Execution,
}

impl Settings {
    fn load(path: Option<&PathBuf>, o: Overrides) -> Result<Self> {
        let (mut config, base_dir) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let config =
                    ExperimentConfig::parse_toml(&text).with_context(|| format!("parsing config {}", p.display()))?;
                let base = p.parent().map(PathBuf::from).unwrap_or_default();
                (config, base)
            }
            None => (ExperimentConfig::default(), PathBuf::new()),
        };
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        config.seed = o.seed.unwrap_or(config.seed);
        config.trials = o.trials.unwrap_or(config.trials);
        if let Some(dir) = o.output_dir {
            config.output_dir = dir;
        }
        if !o.epsilons.is_empty() {
            config.epsilons = o.epsilons;
        }
        if !o.methods.is_empty() {
            config.methods = o.methods;
        }
        if o.region_size.is_some() {
            config.region_size = o.region_size;
        }
        let d = &mut config.design;
        set(&mut d.alpha, o.alpha);
        set(&mut d.gamma_fraction, o.gamma_fraction);
        set(&mut d.f1, o.f1);
        set(&mut d.f2, o.f2);
        set(&mut d.c1, o.c1);
        set(&mut d.c2, o.c2);
        set(&mut d.g, o.g);
        config.validate_parameters()?;
        let exec = if o.sequential { Execution::Sequential } else { Execution::default() };
        Ok(Settings { config, base_dir, exec })
    }
}

fn execute(cli: Cli) -> Result<Status> {
    let settings = Settings::load(cli.config.as_ref(), cli.overrides)?;
    match cli.command {
        Command::Generate => commands::generate(&settings),
        Command::Privatize { input, out } => commands::privatize(&settings, &input, out),
        Command::FitProxy { prior, out } => commands::fit_proxy(&settings, &prior, out),
        Command::Optimize { counts, curves, prior } => commands::optimize(&settings, &counts, &curves, &prior),
        Command::Simulate { truth, allocation, prior } => {
            commands::simulate(&settings, &truth, &allocation, prior.as_deref())
        }
        Command::Run => commands::run(&settings),
        Command::Ablate { param, grid } => commands::ablate(&settings, param, &grid),
        Command::Sparsity { sizes } => commands::sparsity(&settings, &sizes),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are not errors.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(Status::Complete) => ExitCode::SUCCESS,
        Ok(Status::Partial(failed)) => {
            eprintln!("warning: {failed} cell(s) failed; see failures in the output directory");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
