mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gflm::link::LinkKind;
use gflm::select::Criterion;
use gflm::sim::FitLink;

use crate::commands::{CommandError, EXIT_CONFIG};
use crate::config::{BasisSpec, Experiment, FileConfig, FlagConfig, LinkChoice, RunConfig};

/// Generalized functional linear models for curve predictors.
#[derive(Parser, Debug)]
#[command(name = "gflm", version)]
struct Cli {
    /// TOML file with default settings; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the model and write coefficients, the β(t) curve and Γ.
    Fit(Common),
    /// Fit a binary model and report leave-one-out misclassification.
    Classify(Common),
    /// Choose the number of components by AIC or BIC.
    Select(Common),
    /// Simultaneous confidence band for β(t).
    Band(Common),
    /// Run a Monte Carlo experiment.
    Simulate(SimArgs),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Wide CSV: id, response, then one column per grid point.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sidecar grid file; the data file then has no header row.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// fourier:J or empirical:J
    #[arg(long)]
    basis: Option<BasisSpec>,
    /// logit, cloglog, identity, log or spqr
    #[arg(long)]
    link: Option<LinkChoice>,
    /// Number of components; chosen by --criterion when absent.
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// aic or bic
    #[arg(long)]
    criterion: Option<Criterion>,
    /// Fixed SPQR bandwidth.
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Classification threshold on the predicted probability.
    #[arg(long)]
    threshold: Option<f64>,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct SimArgs {
    /// power, misspec, calibration or coverage
    #[arg(long)]
    experiment: Option<Experiment>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    /// Comma-separated signal scales for the power experiment.
    #[arg(long, value_delimiter = ',')]
    delta: Option<Vec<f64>>,
    /// Comma-separated sample sizes for the power experiment.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// logit, cloglog or spqr
    #[arg(long)]
    fit_link: Option<FitLink>,
    /// Generating link: logit or cloglog.
    #[arg(long)]
    true_link: Option<LinkKind>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

impl From<Common> for FlagConfig {
    fn from(c: Common) -> Self {
        FlagConfig {
            data: c.data,
            grid: c.grid,
            basis: c.basis,
            link: c.link,
            p: c.p,
            alpha: c.alpha,
            criterion: c.criterion,
            bandwidth: c.bandwidth,
            seed: c.seed,
            out: c.out,
            threshold: c.threshold,
            sequential: c.sequential,
            ..FlagConfig::default()
        }
    }
}

impl From<SimArgs> for FlagConfig {
    fn from(s: SimArgs) -> Self {
        FlagConfig {
            alpha: s.alpha,
            seed: s.seed,
            out: s.out,
            sequential: s.sequential,
            experiment: s.experiment,
            n: s.n,
            reps: s.reps,
            deltas: s.delta,
            sample_sizes: s.sizes,
            fit_link: s.fit_link,
            true_link: s.true_link,
            ..FlagConfig::default()
        }
    }
}

fn run(cli: Cli) -> Result<(), CommandError> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let (name, flags): (&str, FlagConfig) = match cli.command {
        Command::Fit(c) => ("fit", c.into()),
        Command::Classify(c) => ("classify", c.into()),
        Command::Select(c) => ("select", c.into()),
        Command::Band(c) => ("band", c.into()),
        Command::Simulate(s) => ("simulate", s.into()),
    };
    let cfg = RunConfig::resolve(name, flags, file)?;
    match name {
        "fit" => commands::cmd_fit(&cfg),
        "classify" => commands::cmd_classify(&cfg),
        "select" => commands::cmd_select(&cfg),
        "band" => commands::cmd_band(&cfg),
        _ => commands::cmd_simulate(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code as u8)
        }
    }
}
