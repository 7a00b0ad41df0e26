//! Seeded Monte Carlo execution, CSV records and JSON summaries.

use std::path::Path;

use psi_core::algorithms::{run, Algo, RunConfig, RunRecord};
use psi_core::oracle::characteristic_time;
use psi_core::rng::trial_seed;
use psi_core::Instance;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

/// Iterations of the characteristic-time game used to get oracle weights.
pub const ORACLE_ITERS: usize = 5000;

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    /// Run number within its (instance, algo, delta) group.
    pub run_id: u64,
    pub trial_index: u64,
    pub seed: u64,
    pub instance: String,
    pub algo: String,
    pub stopping: String,
    pub calibration: String,
    pub delta: f64,
    pub tau: u64,
    pub stopped: bool,
    pub correct: bool,
    pub pareto_size: usize,
    pub avg_m_t: f64,
    pub avg_m_t_delta: f64,
    pub fallback_count: u64,
    pub wall_ms: f64,
}

/// A unit of work: one run of one algorithm at one confidence level.
#[derive(Debug, Clone)]
pub struct Trial {
    pub run_id: u64,
    pub trial_index: u64,
    pub seed: u64,
    pub algo: Algo,
    pub delta: f64,
}

/// Trials in canonical order: delta, then algorithm, then run.
pub fn plan(cfg: &ExperimentConfig, first_index: u64) -> Vec<Trial> {
    let mut out = Vec::with_capacity(cfg.runs * cfg.algos.len() * cfg.deltas.len());
    let mut index = first_index;
    for &delta in &cfg.deltas {
        for &algo in &cfg.algos {
            for r in 0..cfg.runs {
                out.push(Trial {
                    run_id: r as u64,
                    trial_index: index,
                    seed: trial_seed(cfg.seed, index),
                    algo,
                    delta,
                });
                index += 1;
            }
        }
    }
    out
}

/// Worker pool bounded by `PSI_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("PSI_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| HarnessError::Config(format!("PSI_THREADS must be a positive integer, got {v}")))?;
        builder = builder.num_threads(n.max(1));
    }
    builder.build().map_err(HarnessError::runtime)
}

/// Oracle weights when any trial needs them.
pub fn oracle_weights(inst: &Instance, algos: &[Algo]) -> Result<Option<Vec<f64>>> {
    if !algos.contains(&Algo::Oracle) {
        return Ok(None);
    }
    let ct = characteristic_time(inst, ORACLE_ITERS, 1e-6).map_err(HarnessError::runtime)?;
    log::info!("{}: T* = {:.4}, oracle weights {:?}", inst.name(), ct.t_star, ct.w_star);
    Ok(Some(ct.w_star))
}

pub fn to_row(trial: &Trial, rec: &RunRecord, label: &str, run_cfg: &RunConfig, timing: bool) -> TrialRecord {
    TrialRecord {
        run_id: trial.run_id,
        trial_index: trial.trial_index,
        seed: trial.seed,
        instance: label.to_string(),
        algo: trial.algo.to_string(),
        stopping: run_cfg.stopping.to_string(),
        calibration: run_cfg.calibration.to_string(),
        delta: trial.delta,
        tau: rec.tau,
        stopped: rec.stopped,
        correct: rec.correct,
        pareto_size: rec.recommended.len(),
        avg_m_t: rec.avg_m_t,
        avg_m_t_delta: rec.avg_m_t_delta,
        fallback_count: rec.fallback_count,
        wall_ms: if timing { rec.wall_ms } else { 0.0 },
    }
}

/// Execute `trials` on `inst` in parallel; rows come back in trial order.
pub fn execute(
    pool: &rayon::ThreadPool,
    cfg: &ExperimentConfig,
    inst: &Instance,
    label: &str,
    trials: &[Trial],
) -> Result<Vec<TrialRecord>> {
    let algos: Vec<Algo> = trials.iter().map(|t| t.algo).collect();
    let w_star = oracle_weights(inst, &algos)?;
    pool.install(|| {
        trials
            .par_iter()
            .map(|trial| {
                let run_cfg = cfg.run_config(trial.delta);
                let rec = run(inst, trial.algo, &run_cfg, w_star.as_deref(), trial.seed)
                    .map_err(|e| HarnessError::Runtime(format!("trial {}: {e}", trial.trial_index)))?;
                if !rec.stopped {
                    log::warn!("trial {} hit the round limit without stopping", trial.trial_index);
                }
                Ok(to_row(trial, &rec, label, &run_cfg, cfg.timing))
            })
            .collect()
    })
}

/// Per-group aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub instance: String,
    pub algo: String,
    pub delta: f64,
    pub runs: usize,
    pub non_stopped: usize,
    pub mean_tau: f64,
    pub median_tau: f64,
    pub std_tau: f64,
    pub error_rate: f64,
    pub mean_wall_ms: f64,
    pub mean_avg_m_t: f64,
    pub mean_avg_m_t_delta: f64,
    pub fallback_count: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub groups: Vec<SummaryRow>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Groups in first-appearance order.
pub fn summarize(rows: &[TrialRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, String, f64)> = Vec::new();
    for r in rows {
        let key = (r.instance.clone(), r.algo.clone(), r.delta);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(instance, algo, delta)| {
            let group: Vec<&TrialRecord> = rows
                .iter()
                .filter(|r| r.instance == instance && r.algo == algo && r.delta == delta)
                .collect();
            let taus: Vec<f64> = group.iter().map(|r| r.tau as f64).collect();
            let pick = |f: fn(&TrialRecord) -> f64| mean(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                runs: group.len(),
                non_stopped: group.iter().filter(|r| !r.stopped).count(),
                mean_tau: mean(&taus),
                median_tau: median(&taus),
                std_tau: std_dev(&taus),
                error_rate: group.iter().filter(|r| !r.correct).count() as f64 / group.len() as f64,
                mean_wall_ms: pick(|r| r.wall_ms),
                mean_avg_m_t: pick(|r| r.avg_m_t),
                mean_avg_m_t_delta: pick(|r| r.avg_m_t_delta),
                fallback_count: group.iter().map(|r| r.fallback_count).sum(),
                instance,
                algo,
                delta,
            }
        })
        .collect()
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

/// Serialize any rows as a headed CSV.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<TrialRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(HarnessError::from)).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(HarnessError::runtime)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Run a whole configuration, writing the records CSV and the summary JSON.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Summary> {
    cfg.validate()?;
    let inst = cfg.instance.load(cfg.noc_features.as_deref())?;
    let label = cfg.instance.label();
    let pool = thread_pool()?;
    let trials = plan(cfg, 0);
    let rows = execute(&pool, cfg, &inst, &label, &trials)?;
    write_csv(&cfg.out, &rows)?;
    let summary = Summary {
        config: cfg.clone(),
        groups: summarize(&rows),
    };
    write_json(&cfg.summary_path(), &summary)?;
    for g in &summary.groups {
        let stopped_note = if g.non_stopped > 0 {
            format!(" ({} not stopped)", g.non_stopped)
        } else {
            String::new()
        };
        log::info!(
            "{} {} delta={}: mean tau {:.1}, error rate {:.4}{}",
            g.instance,
            g.algo,
            g.delta,
            g.mean_tau,
            g.error_rate,
            stopped_note
        );
    }
    Ok(summary)
}
