//! Experiment configuration and instance resolution.

use std::path::{Path, PathBuf};

use psi_core::algorithms::{Algo, RunConfig, StoppingKind, DEFAULT_MAX_ROUNDS};
use psi_core::calibration::CalibrationKind;
use psi_core::instance::{load_noc, GenKind};
use psi_core::rng::seeded;
use psi_core::Instance;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Where the bandit instance comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceSource {
    /// `covboost`, `rotation`, `two-arm`, `correlation:<rho>` or `noc`.
    Builtin(String),
    File(PathBuf),
    Generate(GenSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub kind: GenKind,
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub complexity_cap: Option<f64>,
}

impl InstanceSource {
    /// Builtin name if known, otherwise a file path.
    pub fn parse(s: &str) -> Self {
        let name = s.split(':').next().unwrap_or(s);
        match name {
            "covboost" | "rotation" | "two-arm" | "correlation" | "noc" => Self::Builtin(s.to_string()),
            _ => Self::File(PathBuf::from(s)),
        }
    }

    pub fn load(&self, noc_features: Option<&Path>) -> Result<Instance> {
        match self {
            Self::Builtin(name) => builtin(name, noc_features),
            Self::File(path) => Instance::load(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display()))),
            Self::Generate(spec) => {
                let mut rng = seeded(spec.seed);
                Instance::gen_random(spec.kind, spec.k, spec.d, &mut rng, spec.complexity_cap).map_err(HarnessError::config)
            }
        }
    }

    /// Short label for records.
    pub fn label(&self) -> String {
        match self {
            Self::Builtin(name) => name.clone(),
            Self::File(path) => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "file".into()),
            Self::Generate(spec) => format!("{}-K{}-d{}-s{}", gen_name(spec.kind), spec.k, spec.d, spec.seed),
        }
    }
}

fn gen_name(kind: GenKind) -> &'static str {
    match kind {
        GenKind::GaussianCube => "gaussian",
        GenKind::BernoulliBox => "bernoulli",
        GenKind::Rotation => "rotation",
    }
}

/// Rotation means with the unit-variance correlated covariance.
pub fn correlation_instance(rho: f64) -> Result<Instance> {
    if !(rho > -1.0 && rho < 1.0) {
        return Err(HarnessError::Config(format!("correlation must be in (-1, 1), got {rho}")));
    }
    Instance::rotation(5, 1.0)
        .and_then(|i| i.with_sigma(Instance::correlated_sigma(rho, 1.0)))
        .map(|i| i.with_name(format!("correlation:{rho}")))
        .map_err(HarnessError::config)
}

fn builtin(name: &str, noc_features: Option<&Path>) -> Result<Instance> {
    let (head, arg) = match name.split_once(':') {
        Some((h, a)) => (h, Some(a)),
        None => (name, None),
    };
    match (head, arg) {
        ("covboost", None) => Ok(Instance::covboost()),
        ("rotation", None) => Instance::rotation(5, 0.5).map_err(HarnessError::config),
        ("two-arm", None) => Instance::two_arm(1.0, 1.0).map_err(HarnessError::config),
        ("correlation", Some(rho)) => {
            let rho: f64 = rho
                .parse()
                .map_err(|_| HarnessError::Config(format!("bad correlation in {name}")))?;
            correlation_instance(rho)
        }
        ("noc", None) => load_noc(noc_features)
            .and_then(|d| d.instance())
            .map_err(HarnessError::config),
        _ => Err(HarnessError::Config(format!("unknown builtin instance {name}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub instance: InstanceSource,
    pub noc_features: Option<PathBuf>,
    pub algos: Vec<Algo>,
    pub deltas: Vec<f64>,
    pub runs: usize,
    pub seed: u64,
    pub calibration: CalibrationKind,
    pub stopping: StoppingKind,
    pub alpha: f64,
    pub xi: f64,
    pub max_rounds: u64,
    /// Records CSV; the summary goes next to it with a `.json` extension.
    pub out: PathBuf,
    /// Rounds per trace in profile mode.
    pub horizon: Option<u64>,
    /// Record wall-clock times; off by default so records are reproducible.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            instance: InstanceSource::Builtin("rotation".into()),
            noc_features: None,
            algos: vec![Algo::Psips],
            deltas: vec![0.1],
            runs: 100,
            seed: 42,
            calibration: CalibrationKind::Heuristic,
            stopping: StoppingKind::Ps,
            alpha: 0.25,
            xi: 1.0,
            max_rounds: DEFAULT_MAX_ROUNDS,
            out: PathBuf::from("results.csv"),
            horizon: None,
            timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs < 1 {
            return Err(HarnessError::Config("runs must be at least 1".into()));
        }
        if self.algos.is_empty() {
            return Err(HarnessError::Config("no algorithm selected".into()));
        }
        if self.deltas.is_empty() {
            return Err(HarnessError::Config("no confidence level given".into()));
        }
        if let Some(bad) = self.deltas.iter().find(|d| !(**d > 0.0 && **d < 1.0)) {
            return Err(HarnessError::Config(format!("delta must be in (0, 1), got {bad}")));
        }
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(HarnessError::Config(format!("alpha must be in (0, 1/2), got {}", self.alpha)));
        }
        if !(self.xi > 0.0) {
            return Err(HarnessError::Config(format!("xi must be positive, got {}", self.xi)));
        }
        if self.max_rounds == 0 {
            return Err(HarnessError::Config("max_rounds must be positive".into()));
        }
        Ok(())
    }

    pub fn run_config(&self, delta: f64) -> RunConfig {
        RunConfig {
            delta,
            calibration: self.calibration,
            stopping: self.stopping,
            alpha: self.alpha,
            xi: self.xi,
            max_rounds: self.max_rounds,
            ..RunConfig::default()
        }
    }

    pub fn summary_path(&self) -> PathBuf {
        self.out.with_extension("json")
    }
}
