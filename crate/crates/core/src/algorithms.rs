//! Complete identification strategies.
//!
//! Each run owns its rng (seeded from the trial seed), estimator and learners,
//! so runs are independent and reproducible.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{Calibration, CalibrationKind, Threshold};
use crate::estimator::{Estimator, Mode};
use crate::instance::{Instance, ThetaConstraint};
use crate::learners::{min_learner_draw, mix_forced_exploration, AdaHedge, HalveState, MinLearnerProbe};
use crate::oracle::{DesignInverse, Oracle};
use crate::pareto::{gaps, pareto_set, pareto_set_scan, AltTest, ParetoSet};
use crate::rng::{seeded, RunRng};
use crate::stopping::{glr_stopping_check, ps_stopping_check, recommend, Acceptor, Region};
use crate::{Error, Result};

pub const DEFAULT_MAX_ROUNDS: u64 = 10_000_000;
/// Upper limit on fresh min-learner draws per round before falling back.
pub const LEARNER_CAP_MAX: u64 = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    Psips,
    Uniform,
    Oracle,
    ApeStyle,
}

impl std::str::FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "psips" => Ok(Self::Psips),
            "uniform" | "rr" => Ok(Self::Uniform),
            "oracle" => Ok(Self::Oracle),
            "ape" | "ape-style" => Ok(Self::ApeStyle),
            other => Err(Error::InvalidArgument(format!("unknown algorithm {other}"))),
        }
    }
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Psips => "psips",
            Self::Uniform => "uniform",
            Self::Oracle => "oracle",
            Self::ApeStyle => "ape-style",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingKind {
    Ps,
    Glr,
}

impl std::str::FromStr for StoppingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ps" => Ok(Self::Ps),
            "glr" => Ok(Self::Glr),
            other => Err(Error::InvalidArgument(format!("unknown stopping rule {other}"))),
        }
    }
}

impl std::fmt::Display for StoppingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ps => "ps",
            Self::Glr => "glr",
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub delta: f64,
    pub calibration: CalibrationKind,
    pub stopping: StoppingKind,
    /// Forced-exploration exponent.
    pub alpha: f64,
    /// Ridge for structured instances.
    pub xi: f64,
    pub max_rounds: u64,
    /// Peeling exponent of the thresholds.
    pub s: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            calibration: CalibrationKind::Heuristic,
            stopping: StoppingKind::Ps,
            alpha: 0.25,
            xi: 1.0,
            max_rounds: DEFAULT_MAX_ROUNDS,
            s: 2.0,
        }
    }
}

impl RunConfig {
    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn with_calibration(mut self, kind: CalibrationKind) -> Self {
        self.calibration = kind;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub algo: Algo,
    pub delta: f64,
    /// Samples taken when the run ended.
    pub tau: u64,
    pub stopped: bool,
    pub recommended: ParetoSet,
    pub correct: bool,
    pub avg_m_t: f64,
    pub avg_m_t_delta: f64,
    pub wall_ms: f64,
    pub seed: u64,
    pub fallback_count: u64,
}

#[derive(Default)]
struct Counters {
    m_t: u64,
    rounds_t: u64,
    m_t_delta: u64,
    rounds_t_delta: u64,
    fallbacks: u64,
}

impl Counters {
    fn avg_m_t(&self) -> f64 {
        ratio(self.m_t, self.rounds_t)
    }

    fn avg_m_t_delta(&self) -> f64 {
        ratio(self.m_t_delta, self.rounds_t_delta)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Per-run constants shared by the strategies.
struct Setup {
    mode: Mode,
    answers: Option<DMatrix<f64>>,
    n_answers: usize,
    truth: ParetoSet,
    stop_region: Region,
    cal: Calibration,
    oracle: Oracle,
}

impl Setup {
    fn new(inst: &Instance, cfg: &RunConfig) -> Result<Self> {
        if !(cfg.delta > 0.0 && cfg.delta < 1.0) {
            return Err(Error::InvalidArgument(format!("delta must be in (0, 1), got {}", cfg.delta)));
        }
        if gaps(&inst.answer_means()).is_degenerate() {
            return Err(Error::Degenerate(
                "instance has tied answers; the Pareto set cannot be identified".into(),
            ));
        }
        let mode = if inst.is_unstructured() {
            Mode::Unstructured
        } else {
            Mode::Structured { xi: cfg.xi }
        };
        let answers = (!inst.is_unstructured()).then(|| inst.answers().clone());
        let stop_region = match inst.theta_constraint() {
            ThetaConstraint::Unbounded => Region::All,
            ThetaConstraint::Ball { radius } => Region::ColumnBall { radius },
        };
        Ok(Self {
            mode,
            answers,
            n_answers: inst.n_answers(),
            truth: pareto_set_scan(&inst.answer_means()),
            stop_region,
            cal: Calibration::with_s(cfg.calibration, inst, cfg.xi, cfg.s)?,
            oracle: Oracle::new(inst),
        })
    }

    fn answers(&self) -> Option<&DMatrix<f64>> {
        self.answers.as_ref()
    }

    /// `f₁(t) = β(t, 1/t²)`; without a parameter bound the structured
    /// threshold keeps only its logarithmic term.
    fn f1(&self, t: u64) -> Result<f64> {
        let t = t.max(1) as f64;
        let delta = (1.0 / (t * t)).min(1.0);
        match self.cal.threshold {
            Threshold::Structured {
                dim,
                features,
                xi,
                arm_norm,
                theta_radius,
                ..
            } if !theta_radius.is_finite() => {
                let (d, h) = (dim as f64, features as f64);
                Ok((1.0 / delta).ln() + d * h / 2.0 * (arm_norm * arm_norm * t / (h * xi) + 1.0).ln())
            }
            _ => self.cal.beta(t, delta),
        }
    }

    /// One stopping check; returns whether to stop and the draw budget in force.
    fn stop_check(
        &self,
        cfg: &RunConfig,
        est: &Estimator,
        s: &ParetoSet,
        sink: &mut dyn FnMut(&DMatrix<f64>) -> bool,
        counters: &mut Counters,
        rng: &mut RunRng,
    ) -> Result<(bool, u64)> {
        let t = est.t();
        let budget = self.cal.budget(t, cfg.delta, s.len())?;
        match cfg.stopping {
            StoppingKind::Ps => {
                let c = self.cal.inflation(t, cfg.delta)?;
                let test = AltTest::new(s, self.n_answers);
                let acceptor = Acceptor::new(est, &test, self.stop_region, self.answers());
                let mut sampler = est.sampler().clone();
                let dec = ps_stopping_check(est, s, &mut sampler, &acceptor, budget, c, sink, rng);
                counters.m_t_delta += dec.m_t_delta;
                counters.rounds_t_delta += 1;
                Ok((dec.stopped, budget))
            }
            StoppingKind::Glr => {
                let dec = glr_stopping_check(est, s, &self.oracle, &self.cal, cfg.delta)?;
                Ok((dec.stopped, budget))
            }
        }
    }

    /// Nearest demote projection under the current counts, pushed just inside the alternative.
    fn fallback(&self, est: &Estimator, s: &ParetoSet) -> Result<DMatrix<f64>> {
        let br = self
            .oracle
            .nearest_demote(est.theta_hat(), s, &DesignInverse::from_estimator(est))?;
        let theta = est.theta_hat();
        Ok(theta + (&br.lambda_star - theta) * (1.0 + 1e-9))
    }

    fn record(
        &self,
        algo: Algo,
        cfg: &RunConfig,
        est: &Estimator,
        stopped: bool,
        recommended: ParetoSet,
        counters: &Counters,
        seed: u64,
        start: Instant,
    ) -> RunRecord {
        RunRecord {
            algo,
            delta: cfg.delta,
            tau: est.t(),
            stopped,
            correct: recommended == self.truth,
            recommended,
            avg_m_t: counters.avg_m_t(),
            avg_m_t_delta: counters.avg_m_t_delta(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            seed,
            fallback_count: counters.fallbacks,
        }
    }
}

fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// One round of the game: halving update, joint rejection loop, arm choice.
struct Game {
    hedge: AdaHedge,
    halve: HalveState,
    uniform: Vec<f64>,
}

enum RoundOutcome {
    Stop,
    Pulled,
}

impl Game {
    fn new(inst: &Instance) -> Self {
        let k = inst.n_arms();
        Self {
            hedge: AdaHedge::new(k),
            halve: HalveState::for_instance(inst),
            uniform: vec![1.0 / k as f64; k],
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn round(
        &mut self,
        inst: &Instance,
        st: &Setup,
        cfg: &RunConfig,
        est: &mut Estimator,
        s: &ParetoSet,
        stopping_enabled: bool,
        counters: &mut Counters,
        rng: &mut RunRng,
    ) -> Result<RoundOutcome> {
        let t = est.t();
        if !self.halve.is_fixed() {
            let f1 = st.f1(t)?;
            self.halve.update(est, s, st.answers(), f1);
        }
        est.prepare_sampler();
        let lambda = {
            let est_ref: &Estimator = est;
            let test = AltTest::new(s, st.n_answers);
            let acceptor = Acceptor::new(est_ref, &test, self.halve.region(), st.answers());
            let mut probe = MinLearnerProbe::new(est_ref.theta_hat(), self.halve.inflation(), acceptor);
            let (stop, budget) = st.stop_check(cfg, est_ref, s, &mut |v| probe.offer(v), counters, rng)?;
            if stop && stopping_enabled {
                return Ok(RoundOutcome::Stop);
            }
            let cap = budget.saturating_mul(10).clamp(1, LEARNER_CAP_MAX);
            let mut sampler = est_ref.sampler().clone();
            let draw = min_learner_draw(probe, &mut sampler, cap, rng, || st.fallback(est_ref, s))?;
            counters.m_t += draw.m_t;
            counters.rounds_t += 1;
            if draw.fallback {
                counters.fallbacks += 1;
                log::debug!("min learner fell back at t={t}");
            }
            draw.lambda
        };
        let weights = mix_forced_exploration(self.hedge.weights(), t + 1, cfg.alpha, &self.uniform);
        let arm = sample_index(&weights, rng);
        let gains = est.arm_gains(&lambda);
        self.hedge.feed(&gains)?;
        let x = inst.draw_observation(arm, rng)?;
        est.update(arm, &x)?;
        Ok(RoundOutcome::Pulled)
    }
}

/// PSIPS: posterior-sampling stopping with the AdaHedge / posterior-sampling game.
pub fn run_psips(inst: &Instance, cfg: &RunConfig, seed: u64) -> Result<RunRecord> {
    let start = Instant::now();
    let mut rng = seeded(seed);
    let st = Setup::new(inst, cfg)?;
    let mut est = Estimator::init_sampling(inst, st.mode, &mut rng)?;
    let mut game = Game::new(inst);
    let mut counters = Counters::default();
    let mut s: Option<ParetoSet> = None;
    loop {
        let cur = recommend(&est, st.answers(), s.as_ref());
        if est.t() >= cfg.max_rounds {
            return Ok(st.record(Algo::Psips, cfg, &est, false, cur, &counters, seed, start));
        }
        match game.round(inst, &st, cfg, &mut est, &cur, true, &mut counters, &mut rng)? {
            RoundOutcome::Stop => {
                return Ok(st.record(Algo::Psips, cfg, &est, true, cur, &counters, seed, start));
            }
            RoundOutcome::Pulled => s = Some(cur),
        }
    }
}

// shared loop of the non-adaptive samplers
fn run_passive<F>(inst: &Instance, cfg: &RunConfig, seed: u64, algo: Algo, mut choose: F) -> Result<RunRecord>
where
    F: FnMut(&Estimator, &mut RunRng) -> usize,
{
    let start = Instant::now();
    let mut rng = seeded(seed);
    let st = Setup::new(inst, cfg)?;
    let mut est = Estimator::init_sampling(inst, st.mode, &mut rng)?;
    let mut counters = Counters::default();
    let mut s: Option<ParetoSet> = None;
    loop {
        let cur = recommend(&est, st.answers(), s.as_ref());
        if est.t() >= cfg.max_rounds {
            return Ok(st.record(algo, cfg, &est, false, cur, &counters, seed, start));
        }
        est.prepare_sampler();
        let (stop, _) = st.stop_check(cfg, &est, &cur, &mut |_| true, &mut counters, &mut rng)?;
        if stop {
            return Ok(st.record(algo, cfg, &est, true, cur, &counters, seed, start));
        }
        let arm = choose(&est, &mut rng);
        let x = inst.draw_observation(arm, &mut rng)?;
        est.update(arm, &x)?;
        s = Some(cur);
    }
}

/// Round-robin sampling with the configured stopping rule.
pub fn run_uniform(inst: &Instance, cfg: &RunConfig, seed: u64) -> Result<RunRecord> {
    let k = inst.n_arms() as u64;
    run_passive(inst, cfg, seed, Algo::Uniform, |est, _| (est.t() % k) as usize)
}

/// I.i.d. arm draws from the optimal weights `w_star`.
pub fn run_oracle(inst: &Instance, cfg: &RunConfig, w_star: &[f64], seed: u64) -> Result<RunRecord> {
    if w_star.len() != inst.n_arms() {
        return Err(Error::DimensionMismatch {
            expected: inst.n_arms(),
            got: w_star.len(),
        });
    }
    run_passive(inst, cfg, seed, Algo::Oracle, |_, rng| sample_index(w_star, rng))
}

/// LUCB-style elimination baseline with APE-like confidence radii
/// `√(2 β σ²_max / N_a)`, `β = log(1/δ) + log log t`.
pub fn run_ape(inst: &Instance, cfg: &RunConfig, seed: u64) -> Result<RunRecord> {
    if !inst.is_unstructured() {
        return Err(Error::Unsupported("the APE-style baseline needs an unstructured instance".into()));
    }
    let start = Instant::now();
    let mut rng = seeded(seed);
    let st = Setup::new(inst, cfg)?;
    let mut est = Estimator::init_sampling(inst, Mode::Unstructured, &mut rng)?;
    let counters = Counters::default();
    let sigma_max = inst.sigma().diagonal().max();
    let k = inst.n_arms();
    let d = inst.dim();
    loop {
        let theta = est.theta_hat();
        let s = pareto_set(theta);
        if est.t() >= cfg.max_rounds {
            return Ok(st.record(Algo::ApeStyle, cfg, &est, false, s, &counters, seed, start));
        }
        let t = (est.t() as f64).max(3.0);
        let beta = (1.0 / cfg.delta).ln() + t.ln().ln();
        let radius: Vec<f64> = est
            .counts()
            .iter()
            .map(|&n| (2.0 * beta * sigma_max / n as f64).sqrt())
            .collect();
        let big_m = |a: usize, b: usize| {
            (0..d)
                .map(|c| (theta[(a, c)] - theta[(b, c)]).max(0.0).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let small_m = |a: usize, b: usize| {
            (0..d)
                .map(|c| theta[(a, c)] - theta[(b, c)])
                .fold(f64::INFINITY, f64::min)
        };
        // most violated condition: (violation, z, x)
        let mut worst: Option<(f64, usize, usize)> = None;
        let mut consider = |viol: f64, z: usize, x: usize| {
            if viol >= 0.0 && worst.is_none_or(|(w, _, _)| viol > w) {
                worst = Some((viol, z, x));
            }
        };
        for &z in s.indices() {
            let mut best: Option<(f64, usize)> = None;
            for x in (0..k).filter(|&x| x != z) {
                let margin = big_m(z, x) - radius[z] - radius[x];
                if best.is_none_or(|(m, _)| margin < m) {
                    best = Some((margin, x));
                }
            }
            if let Some((margin, x)) = best {
                consider(-margin, z, x);
            }
        }
        // dominated arms: certified by the best lower bound, challenged by the best upper bound
        for z in s.complement(k) {
            let mut lower = f64::NEG_INFINITY;
            let mut upper: Option<(f64, usize)> = None;
            for &x in s.indices() {
                let (m, r) = (small_m(x, z), radius[x] + radius[z]);
                lower = lower.max(m - r);
                if upper.is_none_or(|(u, _)| m + r > u) {
                    upper = Some((m + r, x));
                }
            }
            if let Some((_, x)) = upper {
                consider(-lower, z, x);
            }
        }
        let Some((_, z, x)) = worst else {
            return Ok(st.record(Algo::ApeStyle, cfg, &est, true, s, &counters, seed, start));
        };
        let counts = est.counts();
        let arm = if counts[x] < counts[z] { x } else { z };
        let obs = inst.draw_observation(arm, &mut rng)?;
        est.update(arm, &obs)?;
    }
}

/// Dispatch on `algo`; `w_star` is required for [`Algo::Oracle`].
pub fn run(inst: &Instance, algo: Algo, cfg: &RunConfig, w_star: Option<&[f64]>, seed: u64) -> Result<RunRecord> {
    match algo {
        Algo::Psips => run_psips(inst, cfg, seed),
        Algo::Uniform => run_uniform(inst, cfg, seed),
        Algo::Oracle => {
            let w = w_star.ok_or_else(|| Error::InvalidArgument("oracle sampler needs w*".into()))?;
            run_oracle(inst, cfg, w, seed)
        }
        Algo::ApeStyle => run_ape(inst, cfg, seed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    /// Samples taken before the round.
    pub t: u64,
    pub m_t: u64,
    /// Stopping-rule draws until the first alternative hit, capped at the budget.
    pub m_t_delta: u64,
    /// Whether the empirical Pareto set differs from the true one.
    pub error: bool,
    pub glr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ProfileOutput {
    pub rows: Vec<ProfileRow>,
    pub estimator: Estimator,
}

/// PSIPS with stopping disabled for `horizon` rounds, tracing the per-round
/// rejection counts and the recommendation error.
pub fn run_profile(inst: &Instance, cfg: &RunConfig, horizon: u64, seed: u64, with_glr: bool) -> Result<ProfileOutput> {
    let mut rng = seeded(seed);
    let st = Setup::new(inst, cfg)?;
    let mut est = Estimator::init_sampling(inst, st.mode, &mut rng)?;
    let mut game = Game::new(inst);
    let mut s: Option<ParetoSet> = None;
    let mut rows = Vec::with_capacity(horizon as usize);
    let mut cfg = cfg.clone();
    cfg.stopping = StoppingKind::Ps;
    for _ in 0..horizon {
        let cur = recommend(&est, st.answers(), s.as_ref());
        let t = est.t();
        let glr = if with_glr {
            Some(st.oracle.glr_infimum(&est, &cur)?)
        } else {
            None
        };
        let error = cur != st.truth;
        let mut counters = Counters::default();
        game.round(inst, &st, &cfg, &mut est, &cur, false, &mut counters, &mut rng)?;
        rows.push(ProfileRow {
            t,
            m_t: counters.m_t,
            m_t_delta: counters.m_t_delta,
            error,
            glr,
        });
        s = Some(cur);
    }
    Ok(ProfileOutput { rows, estimator: est })
}

/// Round-robin sampling for `horizon` rounds without stopping; whether the
/// empirical Pareto set was wrong before each round.
pub fn uniform_error_trace(inst: &Instance, horizon: u64, seed: u64) -> Result<Vec<bool>> {
    let mut rng = seeded(seed);
    let st = Setup::new(inst, &RunConfig::default())?;
    let mut est = Estimator::init_sampling(inst, st.mode, &mut rng)?;
    let k = inst.n_arms() as u64;
    let mut s: Option<ParetoSet> = None;
    let mut errors = Vec::with_capacity(horizon as usize);
    for _ in 0..horizon {
        let cur = recommend(&est, st.answers(), s.as_ref());
        errors.push(cur != st.truth);
        let arm = (est.t() % k) as usize;
        let x = inst.draw_observation(arm, &mut rng)?;
        est.update(arm, &x)?;
        s = Some(cur);
    }
    Ok(errors)
}
