//! Stopping rules and the recommendation rule.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::calibration::{normal_tail, Calibration};
use crate::estimator::{CenteredSampler, Estimator};
use crate::oracle::Oracle;
use crate::pareto::{pareto_set, AltTest, ParetoSet, PieceConstraint};
use crate::Result;

/// Budgets above this are scanned draw by draw but flagged.
pub const LARGE_BUDGET: u64 = 10_000_000;

/// Parameter region intersected with the alternative set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Region {
    All,
    /// `max_c ‖λ e_c‖₂ ≤ radius`.
    ColumnBall { radius: f64 },
    /// `max_a ‖λᵀ a‖_{Σ⁻¹} < bound` over the arms.
    ArmBall { bound: f64 },
}

/// Membership test for `Region ∩ alt(S)`.
pub struct Acceptor<'a> {
    test: &'a AltTest,
    region: Region,
    answers: Option<&'a DMatrix<f64>>,
    arms: &'a DMatrix<f64>,
    sigma_inv: &'a DMatrix<f64>,
    unstructured: bool,
}

impl<'a> Acceptor<'a> {
    /// `answers` are the answer features, `None` in the unstructured setting.
    pub fn new(est: &'a Estimator, test: &'a AltTest, region: Region, answers: Option<&'a DMatrix<f64>>) -> Self {
        Self {
            test,
            region,
            answers,
            arms: est.arms(),
            sigma_inv: est.sigma_inv(),
            unstructured: est.is_unstructured(),
        }
    }

    pub fn in_region(&self, lambda: &DMatrix<f64>) -> bool {
        match self.region {
            Region::All => true,
            Region::ColumnBall { radius } => lambda
                .column_iter()
                .all(|c| c.norm_squared() <= radius * radius),
            Region::ArmBall { bound } => {
                if !bound.is_finite() {
                    return true;
                }
                let rows = if self.unstructured {
                    None
                } else {
                    Some(self.arms * lambda)
                };
                let m = rows.as_ref().unwrap_or(lambda);
                let d = m.ncols();
                let b2 = bound * bound;
                (0..m.nrows()).all(|a| {
                    let mut q = 0.0;
                    for i in 0..d {
                        for j in 0..d {
                            q += m[(a, i)] * self.sigma_inv[(i, j)] * m[(a, j)];
                        }
                    }
                    q < b2
                })
            }
        }
    }

    pub fn accepts(&self, lambda: &DMatrix<f64>) -> bool {
        let in_alt = match self.answers {
            None => self.test.contains(lambda),
            Some(z) => self.test.contains(&(z * lambda)),
        };
        in_alt && self.in_region(lambda)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoppingDecision {
    pub stopped: bool,
    pub recommended: Option<ParetoSet>,
    /// Index of the first alternative hit, or the draws consumed when stopped.
    pub m_t_delta: u64,
    pub draws_used: u64,
    /// GLR statistic when the GLR rule was used.
    pub glr: Option<f64>,
}

/// Above this cover mass the shortcut saves nothing and draws are scanned one by one.
const COVER_MAX_MASS: f64 = 0.5;

/// Posterior-sampling stopping check.
///
/// Draws `v_m`, tests `θ̂ + √c v_m ∈ Θ ∩ alt(S)` and stops after `budget`
/// draws without a hit. Every draw is passed to `sink` until it reports
/// that it needs no more.
///
/// Once the sink is closed the remaining draws are not materialized one by
/// one: `Θ ∩ alt(S)` is covered by half-spaces of known Gaussian mass, the
/// index of the next draw landing in the cover is sampled directly, and only
/// those draws are built and tested. The law of the outcome and of
/// `m_{t,δ}` is the same as scanning every draw.
#[allow(clippy::too_many_arguments)]
pub fn ps_stopping_check<R: Rng + ?Sized>(
    est: &Estimator,
    s: &ParetoSet,
    sampler: &mut CenteredSampler,
    acceptor: &Acceptor<'_>,
    budget: u64,
    inflation: f64,
    sink: &mut dyn FnMut(&DMatrix<f64>) -> bool,
    rng: &mut R,
) -> StoppingDecision {
    ps_check_impl(est, s, sampler, acceptor, budget, inflation, sink, rng, true)
}

/// [`ps_stopping_check`] scanning every draw; used as a reference.
#[allow(clippy::too_many_arguments)]
pub fn ps_stopping_check_exhaustive<R: Rng + ?Sized>(
    est: &Estimator,
    s: &ParetoSet,
    sampler: &mut CenteredSampler,
    acceptor: &Acceptor<'_>,
    budget: u64,
    inflation: f64,
    sink: &mut dyn FnMut(&DMatrix<f64>) -> bool,
    rng: &mut R,
) -> StoppingDecision {
    ps_check_impl(est, s, sampler, acceptor, budget, inflation, sink, rng, false)
}

#[allow(clippy::too_many_arguments)]
fn ps_check_impl<R: Rng + ?Sized>(
    est: &Estimator,
    s: &ParetoSet,
    sampler: &mut CenteredSampler,
    acceptor: &Acceptor<'_>,
    budget: u64,
    inflation: f64,
    sink: &mut dyn FnMut(&DMatrix<f64>) -> bool,
    rng: &mut R,
    shortcut: bool,
) -> StoppingDecision {
    let budget = budget.max(1);
    let theta_hat = est.theta_hat();
    let scale = inflation.max(0.0).sqrt();
    let mut v = theta_hat.clone();
    let mut candidate = theta_hat.clone();
    let mut sink_open = true;
    let mut cover_tried = !shortcut || scale == 0.0;
    let mut m = 0;
    loop {
        if !sink_open && !cover_tried {
            cover_tried = true;
            let cover = Cover::new(est, s, acceptor.answers, inflation);
            if cover.total <= COVER_MAX_MASS {
                return cover.scan(est, s, sampler, acceptor, m, budget, scale, rng);
            }
            if budget > LARGE_BUDGET {
                log::warn!("stopping budget {budget} draws exceeds {LARGE_BUDGET}; a no-hit scan will be slow");
            }
        }
        m += 1;
        sampler.draw_into(rng, &mut v);
        if sink_open {
            sink_open = !sink(&v);
        }
        candidate.copy_from(theta_hat);
        candidate.zip_apply(&v, |c, vi| *c += scale * vi);
        if acceptor.accepts(&candidate) {
            return StoppingDecision::hit(m);
        }
        if m >= budget {
            return StoppingDecision::stop(s, m);
        }
    }
}

impl StoppingDecision {
    fn hit(m: u64) -> Self {
        Self {
            stopped: false,
            recommended: None,
            m_t_delta: m,
            draws_used: m,
            glr: None,
        }
    }

    fn stop(s: &ParetoSet, m: u64) -> Self {
        Self {
            stopped: true,
            recommended: Some(s.clone()),
            m_t_delta: m,
            draws_used: m,
            glr: None,
        }
    }
}

/// Half-spaces `{λ : μ_plus(c) − μ_minus(c) ≤ 0}` whose union contains `alt(S)`:
/// one per ordered member pair (demotion) and, for each non-member, the `d`
/// coordinate half-spaces against one fixed member (promotion).
struct Cover {
    cons: Vec<PieceConstraint>,
    mean: Vec<f64>,
    sd: Vec<f64>,
    cum: Vec<f64>,
    total: f64,
}

impl Cover {
    fn new(est: &Estimator, s: &ParetoSet, answers: Option<&DMatrix<f64>>, inflation: f64) -> Self {
        let owned;
        let means = match answers {
            None => est.theta_hat(),
            Some(z) => {
                owned = z * est.theta_hat();
                &owned
            }
        };
        let (n, d) = means.shape();
        let sigma = est.sigma();
        let counts = est.counts();
        // wᵀ V⁻¹ w for w = z_a − z_b
        let pair_var = |a: usize, b: usize| -> f64 {
            match answers {
                None => 1.0 / counts[a] as f64 + 1.0 / counts[b] as f64,
                Some(z) => {
                    let w = (z.row(a) - z.row(b)).transpose();
                    (w.transpose() * est.v_inv() * &w)[(0, 0)]
                }
            }
        };
        let moments = |plus: usize, minus: usize, c: usize, var: f64| {
            let mean = means[(plus, c)] - means[(minus, c)];
            let sd = (inflation * var * sigma[(c, c)]).sqrt();
            (mean, sd, normal_tail(mean / sd))
        };
        let mut cover = Cover {
            cons: Vec::new(),
            mean: Vec::new(),
            sd: Vec::new(),
            cum: Vec::new(),
            total: 0.0,
        };
        let members = s.indices();
        for &z in members {
            for &x in members.iter().filter(|&&x| x != z) {
                let var = pair_var(z, x);
                let best = (0..d)
                    .map(|c| (c, moments(z, x, c, var)))
                    .min_by(|a, b| a.1 .2.total_cmp(&b.1 .2));
                if let Some((c, (mean, sd, mass))) = best {
                    cover.push(PieceConstraint { plus: z, minus: x, coord: c }, mean, sd, mass);
                }
            }
        }
        for z in s.complement(n) {
            let best = members
                .iter()
                .map(|&x| {
                    let var = pair_var(x, z);
                    let per: Vec<_> = (0..d).map(|c| moments(x, z, c, var)).collect();
                    let mass: f64 = per.iter().map(|p| p.2).sum();
                    (x, per, mass)
                })
                .min_by(|a, b| a.2.total_cmp(&b.2));
            if let Some((x, per, _)) = best {
                for (c, (mean, sd, mass)) in per.into_iter().enumerate() {
                    cover.push(PieceConstraint { plus: x, minus: z, coord: c }, mean, sd, mass);
                }
            }
        }
        cover
    }

    fn push(&mut self, con: PieceConstraint, mean: f64, sd: f64, mass: f64) {
        self.total += mass;
        self.cons.push(con);
        self.mean.push(mean);
        self.sd.push(sd);
        self.cum.push(self.total);
    }

    // continue the check from `m` draws without a hit
    #[allow(clippy::too_many_arguments)]
    fn scan<R: Rng + ?Sized>(
        &self,
        est: &Estimator,
        s: &ParetoSet,
        sampler: &mut CenteredSampler,
        acceptor: &Acceptor<'_>,
        mut m: u64,
        budget: u64,
        scale: f64,
        rng: &mut R,
    ) -> StoppingDecision {
        let theta_hat = est.theta_hat();
        let mut x = theta_hat.clone();
        loop {
            if m >= budget {
                return StoppingDecision::stop(s, m);
            }
            m = m.saturating_add(geometric(self.total, rng));
            if m > budget {
                return StoppingDecision::stop(s, budget);
            }
            let j = self.pick(rng);
            sampler.draw_into(rng, &mut x);
            x.zip_apply(theta_hat, |xi, t| *xi = t + scale * *xi);
            self.condition(est, acceptor.answers, j, &mut x, rng);
            let means_owned;
            let means = match acceptor.answers {
                None => &x,
                Some(z) => {
                    means_owned = z * &x;
                    &means_owned
                }
            };
            let hits = self.cons.iter().filter(|c| c.value(means) <= 0.0).count().max(1);
            if rng.random::<f64>() * (hits as f64) < 1.0 && acceptor.accepts(&x) {
                return StoppingDecision::hit(m);
            }
        }
    }

    fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = rng.random::<f64>() * self.total;
        self.cum.partition_point(|&c| c <= u).min(self.cons.len() - 1)
    }

    // replace the constraint value of an unconditional draw by a draw from its
    // law restricted to `≤ 0`, moving `x` along the regression direction
    fn condition<R: Rng + ?Sized>(
        &self,
        est: &Estimator,
        answers: Option<&DMatrix<f64>>,
        j: usize,
        x: &mut DMatrix<f64>,
        rng: &mut R,
    ) {
        let con = self.cons[j];
        let sigma = est.sigma();
        let c = con.coord;
        let (h, d) = x.shape();
        // V⁻¹ w and wᵀ V⁻¹ w
        let (vw, wvw) = match answers {
            None => {
                let counts = est.counts();
                let mut vw = DVector::zeros(h);
                vw[con.plus] = 1.0 / counts[con.plus] as f64;
                vw[con.minus] = -1.0 / counts[con.minus] as f64;
                (vw, 1.0 / counts[con.plus] as f64 + 1.0 / counts[con.minus] as f64)
            }
            Some(z) => {
                let w = (z.row(con.plus) - z.row(con.minus)).transpose();
                let vw = est.v_inv() * &w;
                let wvw = w.dot(&vw);
                (vw, wvw)
            }
        };
        let current = match answers {
            None => x[(con.plus, c)] - x[(con.minus, c)],
            Some(z) => (0..h).map(|i| (z[(con.plus, i)] - z[(con.minus, i)]) * x[(i, c)]).sum(),
        };
        let t = truncated_tail(self.mean[j] / self.sd[j], rng);
        let target = self.mean[j] - self.sd[j] * t;
        let shift = (target - current) / (wvw * sigma[(c, c)]);
        for i in 0..h {
            if vw[i] == 0.0 {
                continue;
            }
            for k in 0..d {
                x[(i, k)] += shift * vw[i] * sigma[(k, c)];
            }
        }
    }
}

// index of the first success of Bernoulli(q) trials, in 1..
fn geometric<R: Rng + ?Sized>(q: f64, rng: &mut R) -> u64 {
    if q <= 0.0 {
        return u64::MAX;
    }
    if q >= 1.0 {
        return 1;
    }
    let u: f64 = 1.0 - rng.random::<f64>();
    let g = (u.ln() / (-q).ln_1p()).ceil();
    if g >= u64::MAX as f64 {
        u64::MAX
    } else {
        (g as u64).max(1)
    }
}

// standard normal conditioned on `≥ a`
fn truncated_tail<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    if a <= 0.0 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z >= a {
                return z;
            }
        }
    }
    // exponential proposal with the optimal rate
    let rate = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let z = a - (1.0 - rng.random::<f64>()).ln() / rate;
        if rng.random::<f64>() <= (-0.5 * (z - rate) * (z - rate)).exp() {
            return z;
        }
    }
}

/// `GLR(t) = ½ inf_{λ∈alt(Ŝ)} ‖vec(θ̂ − λ)‖²_{Σ⁻¹⊗V_t}`.
pub fn glr_statistic(est: &Estimator, s: &ParetoSet, oracle: &Oracle) -> Result<f64> {
    oracle.glr_infimum(est, s)
}

/// Stop when `GLR(t) > β(t−1, δ)`; `t − 1` is the number of samples so far.
pub fn glr_stopping_check(
    est: &Estimator,
    s: &ParetoSet,
    oracle: &Oracle,
    cal: &Calibration,
    delta: f64,
) -> Result<StoppingDecision> {
    let glr = glr_statistic(est, s, oracle)?;
    let threshold = cal.beta(est.t() as f64, delta)?;
    let stopped = glr > threshold;
    Ok(StoppingDecision {
        stopped,
        recommended: stopped.then(|| s.clone()),
        m_t_delta: 0,
        draws_used: 0,
        glr: Some(glr),
    })
}

/// Empirical Pareto set, reusing `previous` while `θ̂` stays outside its alternative.
pub fn recommend(est: &Estimator, answers: Option<&DMatrix<f64>>, previous: Option<&ParetoSet>) -> ParetoSet {
    let owned;
    let means = match answers {
        None => est.theta_hat(),
        Some(z) => {
            owned = z * est.theta_hat();
            &owned
        }
    };
    if let Some(prev) = previous {
        if !crate::pareto::in_alt(means, prev) {
            return prev.clone();
        }
    }
    pareto_set(means)
}
