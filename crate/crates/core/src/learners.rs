//! The two players of the sampling game.
//!
//! [`AdaHedge`] picks arm weights; the posterior-sampling min learner picks an
//! alternative parameter by rejection; [`HalveState`] tracks the domain bound
//! `B_t` and inflation `η_t` of the min learner.

use nalgebra::DMatrix;
use rand::Rng;

use crate::estimator::{CenteredSampler, Estimator};
use crate::instance::{Instance, ThetaConstraint};
use crate::pareto::ParetoSet;
use crate::stopping::{Acceptor, Region};
use crate::{Error, Result};

/// AdaHedge on gains (de Rooij et al.), run internally on losses `-g`.
#[derive(Debug, Clone)]
pub struct AdaHedge {
    cum_loss: Vec<f64>,
    gap: f64,
    weights: Vec<f64>,
}

impl AdaHedge {
    pub fn new(k: usize) -> Self {
        assert!(k > 0, "AdaHedge needs at least one expert");
        Self {
            cum_loss: vec![0.0; k],
            gap: 0.0,
            weights: vec![1.0 / k as f64; k],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Current learning rate `ln K / Δ`; infinite before any mixability gap.
    pub fn eta(&self) -> f64 {
        let ln_k = (self.weights.len() as f64).ln();
        if self.gap > 0.0 {
            ln_k / self.gap
        } else {
            f64::INFINITY
        }
    }

    pub fn feed(&mut self, gains: &[f64]) -> Result<()> {
        if gains.len() != self.cum_loss.len() {
            return Err(Error::DimensionMismatch {
                expected: self.cum_loss.len(),
                got: gains.len(),
            });
        }
        if gains.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidArgument("non-finite gain".into()));
        }
        if self.cum_loss.len() == 1 {
            return Ok(());
        }
        let eta = self.eta();
        let (w, m_prev) = mix(eta, &self.cum_loss);
        let h: f64 = w.iter().zip(gains).map(|(wi, g)| -wi * g).sum();
        for (l, g) in self.cum_loss.iter_mut().zip(gains) {
            *l -= g;
        }
        let (_, m_new) = mix(eta, &self.cum_loss);
        let delta = (h - (m_new - m_prev)).max(0.0);
        self.gap += delta;
        self.weights = mix(self.eta(), &self.cum_loss).0;
        Ok(())
    }
}

// exponential weights and mix loss at rate eta
fn mix(eta: f64, losses: &[f64]) -> (Vec<f64>, f64) {
    let k = losses.len() as f64;
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    if eta.is_infinite() {
        let ties = losses.iter().filter(|&&l| l == min).count() as f64;
        let w = losses
            .iter()
            .map(|&l| if l == min { 1.0 / ties } else { 0.0 })
            .collect();
        return (w, min);
    }
    let mut w: Vec<f64> = losses.iter().map(|&l| (-eta * (l - min)).exp()).collect();
    let s: f64 = w.iter().sum();
    for x in &mut w {
        *x /= s;
    }
    (w, min - (s / k).ln() / eta)
}

/// `(1 − γ_t) ω + γ_t ω_exp` with `γ_t = t^{−α}`.
pub fn mix_forced_exploration(omega: &[f64], t: u64, alpha: f64, omega_exp: &[f64]) -> Vec<f64> {
    let gamma = (t.max(1) as f64).powf(-alpha);
    omega
        .iter()
        .zip(omega_exp)
        .map(|(w, e)| (1.0 - gamma) * w + gamma * e)
        .collect()
}

/// Estimate-and-Halve bounds.
#[derive(Debug, Clone)]
pub struct HalveState {
    pub b: f64,
    pub c: f64,
    pub p: f64,
    pub eta: f64,
    fixed: Option<Region>,
}

impl HalveState {
    /// `B₁ = C₁ = p₁ = ∞`.
    pub fn new() -> Self {
        Self {
            b: f64::INFINITY,
            c: f64::INFINITY,
            p: f64::INFINITY,
            eta: 0.0,
            fixed: None,
        }
    }

    /// Constant `η = 1/(8 L_A² L_Θ²)` over a fixed ball of radius `L_Θ`.
    pub fn fixed_ball(arm_norm: f64, radius: f64) -> Self {
        Self {
            b: arm_norm * radius,
            c: f64::NAN,
            p: f64::NAN,
            eta: 1.0 / (8.0 * arm_norm * arm_norm * radius * radius),
            fixed: Some(Region::ColumnBall { radius }),
        }
    }

    pub fn for_instance(instance: &Instance) -> Self {
        match instance.theta_constraint() {
            ThetaConstraint::Ball { radius } if !instance.is_unstructured() => {
                Self::fixed_ball(instance.max_arm_norm(), radius)
            }
            _ => Self::new(),
        }
    }

    pub fn is_fixed(&self) -> bool {
        self.fixed.is_some()
    }

    /// `Θ_t`.
    pub fn region(&self) -> Region {
        match self.fixed {
            Some(r) => r,
            None => Region::ArmBall { bound: self.b },
        }
    }

    /// Scale `η_t^{-1/2}` applied to centered draws.
    pub fn inflation(&self) -> f64 {
        if self.eta > 0.0 {
            self.eta.powf(-0.5)
        } else {
            f64::INFINITY
        }
    }

    /// One step of the halving scheme with threshold `f1 = β(t, 1/t²)`.
    ///
    /// `answers` are the answer features, `None` in the unstructured setting.
    pub fn update(&mut self, est: &Estimator, s: &ParetoSet, answers: Option<&DMatrix<f64>>, f1: f64) {
        if self.is_fixed() {
            return;
        }
        let sqrt_f1 = f1.max(0.0).sqrt();
        let theta = est.theta_hat();
        let sigma_inv = est.sigma_inv();
        let d = theta.ncols();
        let h_of = |u_norm2: f64, mu: &[f64]| -> f64 {
            let mut q = 0.0;
            for i in 0..d {
                for j in 0..d {
                    q += mu[i] * sigma_inv[(i, j)] * mu[j];
                }
            }
            sqrt_f1 * u_norm2.max(0.0).sqrt() + q.max(0.0).sqrt()
        };
        let mut mu = vec![0.0; d];
        let (u_big, u_small) = if est.is_unstructured() {
            let counts = est.counts();
            let n = counts.len();
            let pair = |i: usize, j: usize, mu: &mut Vec<f64>| {
                for c in 0..d {
                    mu[c] = theta[(i, c)] - theta[(j, c)];
                }
                h_of(1.0 / counts[i] as f64 + 1.0 / counts[j] as f64, mu)
            };
            let mut big = 0.0f64;
            for &i in s.indices() {
                for &j in s.indices() {
                    if i != j {
                        big = big.max(pair(i, j, &mut mu));
                    }
                }
            }
            for i in s.complement(n) {
                for &j in s.indices() {
                    big = big.max(2.0 * pair(i, j, &mut mu));
                }
            }
            let mut small = 0.0f64;
            for a in 0..n {
                for c in 0..d {
                    mu[c] = theta[(a, c)];
                }
                small = small.max(h_of(1.0 / counts[a] as f64, &mu));
            }
            (big, small)
        } else {
            let answers = answers.expect("structured halving needs answer features");
            let v_inv = est.v_inv();
            let n = answers.nrows();
            let zw = answers * v_inv * answers.transpose();
            let zmu = answers * theta;
            let pair = |i: usize, j: usize, mu: &mut Vec<f64>| {
                for c in 0..d {
                    mu[c] = zmu[(i, c)] - zmu[(j, c)];
                }
                let norm2 = zw[(i, i)] - 2.0 * zw[(i, j)] + zw[(j, j)];
                h_of(norm2, mu)
            };
            let mut big = 0.0f64;
            for &i in s.indices() {
                for &j in s.indices() {
                    if i != j {
                        big = big.max(pair(i, j, &mut mu));
                    }
                }
            }
            for i in s.complement(n) {
                for &j in s.indices() {
                    big = big.max(2.0 * pair(i, j, &mut mu));
                }
            }
            let arms = est.arms();
            let amu = arms * theta;
            let aw = arms * v_inv * arms.transpose();
            let mut small = 0.0f64;
            for a in 0..arms.nrows() {
                for c in 0..d {
                    mu[c] = amu[(a, c)];
                }
                small = small.max(h_of(aw[(a, a)], &mu));
            }
            (big, small)
        };
        if u_big <= 2.0 * self.p {
            self.p = u_big;
        }
        if u_small <= 2.0 * self.c {
            self.c = u_small;
        }
        self.b = self.c + self.p;
        self.eta = 1.0 / (8.0 * self.b * self.b);
    }
}

impl Default for HalveState {
    fn default() -> Self {
        Self::new()
    }
}

/// Min-learner candidate search over a stream of centered draws `v`,
/// accepting the first `θ̂ + η^{-1/2} v` inside `Θ_t ∩ alt(S)`.
pub struct MinLearnerProbe<'a> {
    theta_hat: &'a DMatrix<f64>,
    scale: f64,
    acceptor: Acceptor<'a>,
    candidate: DMatrix<f64>,
    found: Option<DMatrix<f64>>,
    seen: u64,
}

impl<'a> MinLearnerProbe<'a> {
    pub fn new(theta_hat: &'a DMatrix<f64>, scale: f64, acceptor: Acceptor<'a>) -> Self {
        Self {
            theta_hat,
            scale,
            acceptor,
            candidate: theta_hat.clone(),
            found: None,
            seen: 0,
        }
    }

    pub fn is_done(&self) -> bool {
        self.found.is_some()
    }

    /// Number of draws examined so far.
    pub fn seen(&self) -> u64 {
        self.seen
    }

    /// Examine one centered draw; returns whether a candidate has been accepted.
    pub fn offer(&mut self, v: &DMatrix<f64>) -> bool {
        if self.found.is_some() {
            return true;
        }
        self.seen += 1;
        if !self.scale.is_finite() {
            return false;
        }
        self.candidate.copy_from(self.theta_hat);
        let scale = self.scale;
        self.candidate.zip_apply(v, |c, vi| *c += scale * vi);
        if self.acceptor.accepts(&self.candidate) {
            self.found = Some(self.candidate.clone());
            return true;
        }
        false
    }

    pub fn into_found(self) -> Option<(DMatrix<f64>, u64)> {
        let seen = self.seen;
        self.found.map(|l| (l, seen))
    }
}

#[derive(Debug, Clone)]
pub struct MinLearnerDraw {
    pub lambda: DMatrix<f64>,
    /// Rejection count `m_t` (index of the accepted draw, or draws spent before falling back).
    pub m_t: u64,
    pub fallback: bool,
}

/// Finish the min-learner search with fresh draws, falling back after `cap` draws.
pub fn min_learner_draw<R, F>(
    mut probe: MinLearnerProbe<'_>,
    sampler: &mut CenteredSampler,
    cap: u64,
    rng: &mut R,
    fallback: F,
) -> Result<MinLearnerDraw>
where
    R: Rng + ?Sized,
    F: FnOnce() -> Result<DMatrix<f64>>,
{
    let mut v = probe.theta_hat.clone();
    while !probe.is_done() && probe.seen() < cap {
        sampler.draw_into(rng, &mut v);
        probe.offer(&v);
    }
    let seen = probe.seen();
    match probe.into_found() {
        Some((lambda, m_t)) => Ok(MinLearnerDraw {
            lambda,
            m_t,
            fallback: false,
        }),
        None => Ok(MinLearnerDraw {
            lambda: fallback()?,
            m_t: seen,
            fallback: true,
        }),
    }
}

/// Radius `ε` of the region around `means` known to contain every best response.
pub fn compact_radius(means: &DMatrix<f64>, s: &ParetoSet, sigma_inv: &DMatrix<f64>) -> f64 {
    let n = means.nrows();
    let dist = |i: usize, j: usize| {
        let r = (means.row(i) - means.row(j)).transpose();
        (r.transpose() * sigma_inv * &r)[(0, 0)].sqrt()
    };
    let mut within = 0.0f64;
    for &i in s.indices() {
        for &j in s.indices() {
            within = within.max(dist(i, j));
        }
    }
    let mut cross = 0.0f64;
    for i in s.complement(n) {
        for &j in s.indices() {
            cross = cross.max(dist(i, j));
        }
    }
    (2.0 * cross).max(within)
}
