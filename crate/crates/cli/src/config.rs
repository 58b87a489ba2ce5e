//! Run configuration: command-line flags over config-file keys over defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gflm::glm::SolverConfig;
use gflm::link::{LinkKind, LinkSpec};
use gflm::select::{Criterion, Method};
use gflm::sim::SimDesign;
use gflm::spqr::SpqrConfig;
use gflm::GflmError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BasisSpec {
    Fourier(usize),
    Empirical(usize),
}

impl BasisSpec {
    pub fn len(self) -> usize {
        match self {
            BasisSpec::Fourier(j) | BasisSpec::Empirical(j) => j,
        }
    }
}

impl FromStr for BasisSpec {
    type Err = GflmError;

    fn from_str(s: &str) -> Result<Self, GflmError> {
        let bad = || GflmError::Config(format!("basis {s:?} is not fourier:J or empirical:J"));
        let (kind, j) = s.split_once(':').ok_or_else(bad)?;
        let j: usize = j.trim().parse().map_err(|_| bad())?;
        if j == 0 {
            return Err(bad());
        }
        match kind.trim() {
            "fourier" => Ok(BasisSpec::Fourier(j)),
            "empirical" => Ok(BasisSpec::Empirical(j)),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for BasisSpec {
    type Error = GflmError;

    fn try_from(s: String) -> Result<Self, GflmError> {
        s.parse()
    }
}

impl From<BasisSpec> for String {
    fn from(b: BasisSpec) -> String {
        b.to_string()
    }
}

impl fmt::Display for BasisSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BasisSpec::Fourier(j) => write!(f, "fourier:{j}"),
            BasisSpec::Empirical(j) => write!(f, "empirical:{j}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LinkChoice {
    Known(LinkKind),
    Spqr,
}

impl FromStr for LinkChoice {
    type Err = GflmError;

    fn from_str(s: &str) -> Result<Self, GflmError> {
        if s.eq_ignore_ascii_case("spqr") {
            Ok(LinkChoice::Spqr)
        } else {
            s.parse().map(LinkChoice::Known)
        }
    }
}

impl TryFrom<String> for LinkChoice {
    type Error = GflmError;

    fn try_from(s: String) -> Result<Self, GflmError> {
        s.parse()
    }
}

impl From<LinkChoice> for String {
    fn from(l: LinkChoice) -> String {
        l.to_string()
    }
}

impl fmt::Display for LinkChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinkChoice::Known(k) => write!(f, "{k}"),
            LinkChoice::Spqr => f.write_str("spqr"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Power,
    Misspec,
    Calibration,
    Coverage,
}

impl FromStr for Experiment {
    type Err = GflmError;

    fn from_str(s: &str) -> Result<Self, GflmError> {
        match s {
            "power" => Ok(Experiment::Power),
            "misspec" => Ok(Experiment::Misspec),
            "calibration" => Ok(Experiment::Calibration),
            "coverage" => Ok(Experiment::Coverage),
            other => Err(GflmError::Config(format!("unknown experiment {other:?}"))),
        }
    }
}

/// Simulation settings beyond the design itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateSection {
    pub experiment: Experiment,
    pub deltas: Vec<f64>,
    pub sample_sizes: Vec<usize>,
    #[serde(flatten)]
    pub design: SimDesign,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            experiment: Experiment::Power,
            deltas: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            sample_sizes: vec![50, 200],
            design: SimDesign::default(),
        }
    }
}

/// Keys accepted in the TOML config file; everything is optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    pub basis: Option<BasisSpec>,
    pub link: Option<LinkChoice>,
    pub p: Option<usize>,
    pub alpha: Option<f64>,
    pub criterion: Option<Criterion>,
    pub bandwidth: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threshold: Option<f64>,
    pub sequential: Option<bool>,
    pub solver: Option<SolverConfig>,
    pub spqr: Option<SpqrConfig>,
    pub simulate: Option<SimulateSection>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, GflmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GflmError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| GflmError::Config(format!("{}: {e}", path.display())))
    }
}

/// Values given on the command line; `None` defers to the file or default.
#[derive(Debug, Clone, Default)]
pub struct FlagConfig {
    pub data: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    pub basis: Option<BasisSpec>,
    pub link: Option<LinkChoice>,
    pub p: Option<usize>,
    pub alpha: Option<f64>,
    pub criterion: Option<Criterion>,
    pub bandwidth: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threshold: Option<f64>,
    pub sequential: bool,
    pub experiment: Option<Experiment>,
    pub n: Option<usize>,
    pub reps: Option<usize>,
    pub deltas: Option<Vec<f64>>,
    pub sample_sizes: Option<Vec<usize>>,
    pub fit_link: Option<gflm::sim::FitLink>,
    pub true_link: Option<LinkKind>,
}

/// Effective configuration of a run, echoed into the manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub data: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    pub basis: BasisSpec,
    pub link: LinkChoice,
    pub p: Option<usize>,
    pub alpha: f64,
    pub criterion: Criterion,
    pub bandwidth: Option<f64>,
    pub seed: u64,
    pub out: PathBuf,
    pub threshold: f64,
    pub sequential: bool,
    pub solver: SolverConfig,
    pub spqr: SpqrConfig,
    pub simulate: SimulateSection,
}

impl RunConfig {
    pub fn resolve(command: &str, flags: FlagConfig, file: FileConfig) -> Result<Self, GflmError> {
        let mut simulate = file.simulate.unwrap_or_default();
        let seed = flags.seed.or(file.seed).unwrap_or(simulate.design.seed);
        simulate.design.seed = seed;
        if let Some(e) = flags.experiment {
            simulate.experiment = e;
        }
        if let Some(n) = flags.n {
            simulate.design.n = n;
        }
        if let Some(r) = flags.reps {
            simulate.design.n_reps = r;
        }
        if let Some(d) = flags.deltas {
            simulate.deltas = d;
        }
        if let Some(s) = flags.sample_sizes {
            simulate.sample_sizes = s;
        }
        if let Some(f) = flags.fit_link {
            simulate.design.link_fit = f;
        }
        if let Some(t) = flags.true_link {
            simulate.design.link_true = t;
        }
        let mut spqr = file.spqr.unwrap_or_default();
        let bandwidth = flags.bandwidth.or(file.bandwidth);
        if bandwidth.is_some() {
            spqr.bandwidth = bandwidth;
        }
        let cfg = RunConfig {
            command: command.into(),
            data: flags.data.or(file.data),
            grid: flags.grid.or(file.grid),
            basis: flags.basis.or(file.basis).unwrap_or(BasisSpec::Empirical(10)),
            link: flags.link.or(file.link).unwrap_or(LinkChoice::Known(LinkKind::Logit)),
            p: flags.p.or(file.p),
            alpha: flags.alpha.or(file.alpha).unwrap_or(0.05),
            criterion: flags.criterion.or(file.criterion).unwrap_or(Criterion::Aic),
            bandwidth: spqr.bandwidth,
            seed,
            out: flags.out.or(file.out).unwrap_or_else(|| PathBuf::from("gflm-out")),
            threshold: flags.threshold.or(file.threshold).unwrap_or(0.5),
            sequential: flags.sequential || file.sequential.unwrap_or(false),
            solver: file.solver.unwrap_or_default(),
            spqr,
            simulate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), GflmError> {
        let bad = |m: String| Err(GflmError::Config(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha = {} outside (0, 1)", self.alpha));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold = {} outside (0, 1)", self.threshold));
        }
        if let Some(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return bad(format!("bandwidth = {h} must be positive"));
            }
        }
        if let Some(p) = self.p {
            if p == 0 || p > self.basis.len() {
                return bad(format!("p = {p} outside 1..={} for basis {}", self.basis.len(), self.basis));
            }
        }
        if self.command != "simulate" && self.data.is_none() {
            return bad("--data is required".into());
        }
        if self.command == "simulate" {
            self.simulate.design.validate()?;
        }
        Ok(())
    }

    pub fn method(&self) -> Method {
        match self.link {
            LinkChoice::Known(k) => Method::Known(LinkSpec::with_clamp(k, self.solver.clamp_eps)),
            LinkChoice::Spqr => Method::Spqr {
                config: self.spqr,
                init: LinkSpec::logit(),
            },
        }
    }

    pub fn execution(&self) -> gflm::par::Execution {
        if self.sequential {
            gflm::par::Execution::Sequential
        } else {
            gflm::par::Execution::Parallel
        }
    }
}
