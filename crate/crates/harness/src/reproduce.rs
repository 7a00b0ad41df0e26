//! One subcommand per experiment; each writes plot-ready CSVs into an output directory.

use std::path::{Path, PathBuf};

use psi_core::algorithms::{run_profile, uniform_error_trace, Algo, RunConfig};
use psi_core::instance::{load_noc, GenKind};
use psi_core::rng::{seeded, trial_seed};
use psi_core::Instance;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{correlation_instance, ExperimentConfig, GenSpec, InstanceSource};
use crate::error::{HarnessError, Result};
use crate::experiment::{execute, plan, summarize, thread_pool, write_csv, write_json, Summary, SummaryRow, TrialRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Covboost,
    Correlation,
    RandomGaussian,
    RandomBernoulli,
    Noc,
    Rejections,
    PosteriorError,
}

impl std::str::FromStr for Experiment {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "covboost" => Ok(Self::Covboost),
            "correlation" => Ok(Self::Correlation),
            "random-gaussian" => Ok(Self::RandomGaussian),
            "random-bernoulli" => Ok(Self::RandomBernoulli),
            "noc" => Ok(Self::Noc),
            "rejections" => Ok(Self::Rejections),
            "posterior-error" => Ok(Self::PosteriorError),
            other => Err(HarnessError::Config(format!("unknown experiment {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReproduceOptions {
    /// Fraction of the full run counts, in (0, 1].
    pub scale: f64,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Overrides the experiment's confidence level.
    pub delta: Option<f64>,
    pub noc_features: Option<PathBuf>,
    pub timing: bool,
}

impl Default for ReproduceOptions {
    fn default() -> Self {
        Self {
            scale: 0.2,
            out_dir: PathBuf::from("out"),
            seed: 42,
            delta: None,
            noc_features: None,
            timing: false,
        }
    }
}

/// A threshold check evaluated on the produced data.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub checks: Vec<Check>,
}

impl ReproduceOptions {
    fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(HarnessError::Config(format!("scale must be in (0, 1], got {}", self.scale)));
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d < 1.0) {
                return Err(HarnessError::Config(format!("delta must be in (0, 1), got {d}")));
            }
        }
        Ok(())
    }

    fn scaled(&self, full: usize) -> usize {
        ((full as f64 * self.scale).round() as usize).max(1)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn base_config(&self, delta: f64, algos: Vec<Algo>, runs: usize) -> ExperimentConfig {
        ExperimentConfig {
            algos,
            deltas: vec![self.delta.unwrap_or(delta)],
            runs,
            seed: self.seed,
            timing: self.timing,
            noc_features: self.noc_features.clone(),
            ..ExperimentConfig::default()
        }
    }
}

pub fn reproduce(which: Experiment, opts: &ReproduceOptions) -> Result<Outcome> {
    opts.validate()?;
    std::fs::create_dir_all(&opts.out_dir)?;
    match which {
        Experiment::Covboost => covboost(opts),
        Experiment::Correlation => correlation(opts),
        Experiment::RandomGaussian => random(opts, GenKind::GaussianCube),
        Experiment::RandomBernoulli => random(opts, GenKind::BernoulliBox),
        Experiment::Noc => noc(opts),
        Experiment::Rejections => rejections(opts),
        Experiment::PosteriorError => posterior_error(opts),
    }
}

fn group<'a>(groups: &'a [SummaryRow], algo: Algo) -> Option<&'a SummaryRow> {
    let name = algo.to_string();
    groups.iter().find(|g| g.algo == name)
}

fn write_records(opts: &ReproduceOptions, stem: &str, cfg: &ExperimentConfig, rows: &[TrialRecord], out: &mut Outcome) -> Result<Vec<SummaryRow>> {
    let csv = opts.path(&format!("{stem}_records.csv"));
    write_csv(&csv, rows)?;
    let groups = summarize(rows);
    let json = opts.path(&format!("{stem}_summary.json"));
    write_json(
        &json,
        &Summary {
            config: cfg.clone(),
            groups: groups.clone(),
        },
    )?;
    out.files.push(csv);
    out.files.push(json);
    Ok(groups)
}

fn covboost(opts: &ReproduceOptions) -> Result<Outcome> {
    let algos = vec![Algo::Psips, Algo::Uniform, Algo::Oracle, Algo::ApeStyle];
    let mut cfg = opts.base_config(0.1, algos, opts.scaled(500));
    cfg.instance = InstanceSource::Builtin("covboost".into());
    let inst = Instance::covboost();
    let pool = thread_pool()?;
    let rows = execute(&pool, &cfg, &inst, "covboost", &plan(&cfg, 0))?;
    let mut out = Outcome::default();
    let groups = write_records(opts, "covboost", &cfg, &rows, &mut out)?;
    if let Some(g) = group(&groups, Algo::Psips) {
        let (lo, hi) = (14_300.0, 26_600.0);
        out.checks.push(Check::new(
            "covboost_psips_mean_tau",
            g.mean_tau >= lo && g.mean_tau <= hi,
            format!("mean tau {:.1} over {} runs, target [{lo}, {hi}]", g.mean_tau, g.runs),
        ));
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct SweepRow {
    rho: f64,
    algo: String,
    runs: usize,
    mean_tau: f64,
    median_tau: f64,
    std_tau: f64,
    error_rate: f64,
}

pub const CORRELATIONS: [f64; 5] = [-0.9, -0.5, 0.0, 0.5, 0.9];

fn correlation(opts: &ReproduceOptions) -> Result<Outcome> {
    let algos = vec![Algo::Psips, Algo::ApeStyle];
    let runs = opts.scaled(500);
    let pool = thread_pool()?;
    let mut all_rows = Vec::new();
    let mut sweep = Vec::new();
    let mut cfg = opts.base_config(0.01, algos.clone(), runs);
    for (i, &rho) in CORRELATIONS.iter().enumerate() {
        let inst = correlation_instance(rho)?;
        let label = format!("correlation:{rho}");
        cfg.instance = InstanceSource::Builtin(label.clone());
        let first = (i * runs * algos.len()) as u64;
        let rows = execute(&pool, &cfg, &inst, &label, &plan(&cfg, first))?;
        for g in summarize(&rows) {
            sweep.push(SweepRow {
                rho,
                algo: g.algo,
                runs: g.runs,
                mean_tau: g.mean_tau,
                median_tau: g.median_tau,
                std_tau: g.std_tau,
                error_rate: g.error_rate,
            });
        }
        all_rows.extend(rows);
    }
    let mut out = Outcome::default();
    write_records(opts, "correlation", &cfg, &all_rows, &mut out)?;
    let sweep_path = opts.path("correlation_sweep.csv");
    write_csv(&sweep_path, &sweep)?;
    out.files.push(sweep_path);

    let mean_at = |algo: Algo, rho: f64| {
        sweep
            .iter()
            .find(|r| r.algo == algo.to_string() && r.rho == rho)
            .map(|r| r.mean_tau)
            .unwrap_or(f64::NAN)
    };
    let (neg, zero) = (mean_at(Algo::Psips, -0.9), mean_at(Algo::Psips, 0.0));
    out.checks.push(Check::new(
        "correlation_psips_halving",
        neg <= 0.5 * zero,
        format!("mean tau {neg:.1} at rho=-0.9 vs {zero:.1} at rho=0 (ratio {:.3})", neg / zero),
    ));
    let ape: Vec<f64> = [-0.9, 0.0, 0.9].iter().map(|&r| mean_at(Algo::ApeStyle, r)).collect();
    let (lo, hi) = ape.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
    let spread = (hi - lo) / lo;
    out.checks.push(Check::new(
        "correlation_ape_flat",
        spread < 0.1,
        format!("ape-style mean tau {ape:.1?} over rho in {{-0.9, 0, 0.9}}, relative spread {spread:.3}"),
    ));
    Ok(out)
}

fn random(opts: &ReproduceOptions, kind: GenKind) -> Result<Outcome> {
    let stem = match kind {
        GenKind::BernoulliBox => "random_bernoulli",
        _ => "random_gaussian",
    };
    let n_instances = opts.scaled(250);
    let algos = vec![Algo::Psips, Algo::Uniform, Algo::Oracle, Algo::ApeStyle];
    let pool = thread_pool()?;
    let mut cfg = opts.base_config(0.1, algos.clone(), 1);
    let mut rows = Vec::new();
    for i in 0..n_instances {
        let spec = GenSpec {
            kind,
            k: 5,
            d: 2,
            seed: trial_seed(opts.seed ^ 0x5EED, i as u64),
            complexity_cap: Some(500.0),
        };
        let source = InstanceSource::Generate(spec);
        let inst = source.load(None)?;
        cfg.instance = source.clone();
        let first = (i * algos.len()) as u64;
        let mut batch = execute(&pool, &cfg, &inst, &source.label(), &plan(&cfg, first))?;
        for r in &mut batch {
            r.run_id = i as u64;
        }
        rows.extend(batch);
    }
    // one group per algorithm across instances
    let mut pooled = rows.clone();
    for r in &mut pooled {
        r.instance = stem.to_string();
    }
    let mut out = Outcome::default();
    let csv = opts.path(&format!("{stem}_records.csv"));
    write_csv(&csv, &rows)?;
    out.files.push(csv);
    let json = opts.path(&format!("{stem}_summary.json"));
    let groups = summarize(&pooled);
    write_json(&json, &Summary { config: cfg, groups: groups.clone() })?;
    out.files.push(json);
    for g in &groups {
        out.checks.push(Check::new(
            &format!("{stem}_{}_error", g.algo),
            g.error_rate <= g.delta,
            format!("error rate {:.4} at delta {}", g.error_rate, g.delta),
        ));
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct ThetaRow {
    row: usize,
    energy: f64,
    runtime: f64,
}

fn noc(opts: &ReproduceOptions) -> Result<Outcome> {
    let data = load_noc(opts.noc_features.as_deref()).map_err(HarnessError::config)?;
    let mut out = Outcome::default();
    let theta_path = opts.path("noc_theta.csv");
    let theta_rows: Vec<ThetaRow> = (0..data.theta.nrows())
        .map(|i| ThetaRow {
            row: i,
            energy: data.theta[(i, 0)],
            runtime: data.theta[(i, 1)],
        })
        .collect();
    write_csv(&theta_path, &theta_rows)?;
    out.files.push(theta_path);
    if !data.has_features() {
        log::warn!("no design feature file supplied; only the fitted parameter was written");
        return Ok(out);
    }
    let inst = data.instance().map_err(HarnessError::config)?;
    let size = inst.pareto_set().len();
    out.checks.push(Check::new("noc_pareto_size", size == 4, format!("{size} Pareto-optimal designs")));
    let mut cfg = opts.base_config(0.1, vec![Algo::Psips, Algo::Oracle], opts.scaled(500));
    cfg.instance = InstanceSource::Builtin("noc".into());
    let pool = thread_pool()?;
    let rows = execute(&pool, &cfg, &inst, "noc", &plan(&cfg, 0))?;
    write_records(opts, "noc", &cfg, &rows, &mut out)?;
    Ok(out)
}

#[derive(Debug, Serialize)]
struct RejectionRow {
    round: u64,
    mean_t: f64,
    mean_m_t: f64,
    mean_m_t_delta: f64,
}

pub const PROFILE_HORIZON: u64 = 5000;

fn rejections(opts: &ReproduceOptions) -> Result<Outcome> {
    let inst = Instance::rotation(5, 0.5).map_err(HarnessError::runtime)?;
    let runs = opts.scaled(500);
    let cfg = RunConfig::default().with_delta(opts.delta.unwrap_or(0.1));
    let pool = thread_pool()?;
    let traces: Vec<Vec<(u64, u64, u64)>> = pool.install(|| {
        (0..runs)
            .into_par_iter()
            .map(|i| {
                run_profile(&inst, &cfg, PROFILE_HORIZON, trial_seed(opts.seed, i as u64), false)
                    .map(|p| p.rows.iter().map(|r| (r.t, r.m_t, r.m_t_delta)).collect())
                    .map_err(HarnessError::runtime)
            })
            .collect::<Result<_>>()
    })?;
    let n = runs as f64;
    let rows: Vec<RejectionRow> = (0..PROFILE_HORIZON as usize)
        .map(|k| {
            let (mut t, mut a, mut b) = (0.0, 0.0, 0.0);
            for tr in &traces {
                t += tr[k].0 as f64;
                a += tr[k].1 as f64;
                b += tr[k].2 as f64;
            }
            RejectionRow {
                round: k as u64 + 1,
                mean_t: t / n,
                mean_m_t: a / n,
                mean_m_t_delta: b / n,
            }
        })
        .collect();
    let path = opts.path("rejections.csv");
    write_csv(&path, &rows)?;
    let decile = PROFILE_HORIZON as usize / 10;
    let avg = |rs: &[RejectionRow]| rs.iter().map(|r| r.mean_m_t_delta).sum::<f64>() / rs.len() as f64;
    let (first, last) = (avg(&rows[..decile]), avg(&rows[rows.len() - decile..]));
    Ok(Outcome {
        files: vec![path],
        checks: vec![
            Check::new("rejections_rows", rows.len() == PROFILE_HORIZON as usize, format!("{} rows", rows.len())),
            Check::new(
                "rejections_grow",
                last > first,
                format!("mean m_t_delta {first:.2} over the first decile, {last:.2} over the last"),
            ),
        ],
    })
}

#[derive(Debug, Serialize)]
struct ErrorRow {
    round: u64,
    psips_error: f64,
    uniform_error: f64,
}

fn posterior_error(opts: &ReproduceOptions) -> Result<Outcome> {
    let inst = Instance::covboost();
    let runs = opts.scaled(1000);
    let cfg = RunConfig::default().with_delta(opts.delta.unwrap_or(0.1));
    let pool = thread_pool()?;
    let traces: Vec<(Vec<bool>, Vec<bool>)> = pool.install(|| {
        (0..runs)
            .into_par_iter()
            .map(|i| {
                let seed = trial_seed(opts.seed, i as u64);
                let ps = run_profile(&inst, &cfg, PROFILE_HORIZON, seed, false).map_err(HarnessError::runtime)?;
                let rr = uniform_error_trace(&inst, PROFILE_HORIZON, seed).map_err(HarnessError::runtime)?;
                Ok((ps.rows.iter().map(|r| r.error).collect(), rr))
            })
            .collect::<Result<_>>()
    })?;
    let n = runs as f64;
    let rows: Vec<ErrorRow> = (0..PROFILE_HORIZON as usize)
        .map(|k| ErrorRow {
            round: k as u64 + 1,
            psips_error: traces.iter().filter(|t| t.0[k]).count() as f64 / n,
            uniform_error: traces.iter().filter(|t| t.1[k]).count() as f64 / n,
        })
        .collect();
    let path = opts.path("posterior_error.csv");
    write_csv(&path, &rows)?;
    let (first, last) = (&rows[0], &rows[rows.len() - 1]);
    Ok(Outcome {
        files: vec![path],
        checks: vec![Check::new(
            "posterior_error_decreases",
            last.psips_error <= first.psips_error,
            format!("psips error {:.3} at round 1, {:.3} at round {}", first.psips_error, last.psips_error, last.round),
        )],
    })
}

/// Write the generator's instance document.
pub fn gen_instance_file(spec: &str, k: usize, d: usize, seed: u64, cap: Option<f64>, path: &Path) -> Result<Instance> {
    let kind: GenKind = spec.parse().map_err(HarnessError::config)?;
    let inst = Instance::gen_random(kind, k, d, &mut seeded(seed), cap).map_err(HarnessError::config)?;
    let text = inst.to_json_string().map_err(HarnessError::runtime)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, text + "\n")?;
    Ok(inst)
}
