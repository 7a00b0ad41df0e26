//! Threshold functions for the stopping rules.
//!
//! Everything here is a pure function of its arguments or of the immutable
//! constants cached in a [`Calibration`]. Two families of `(M, c)` are
//! provided: the conservative one that carries a δ-correctness guarantee
//! ([`CalibrationKind::Lemma2`]) and the cheaper heuristic used for the
//! benchmark experiments ([`CalibrationKind::Heuristic`]).

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::instance::{Instance, ThetaConstraint};
use crate::{Error, Result};

const SQRT_2PI: f64 = 2.506_628_274_631_000_5;
const HALF_SQRT_2PI: f64 = 1.253_314_137_315_500_3;

/// Mills ratio `R(x) = P(X > x) / φ(x)` of the standard normal.
///
/// Computed without forming the tail probability, so it stays accurate where
/// `erfc` underflows: a power series on `[-8, 1]`, Laplace's continued
/// fraction above 1, and the complement identity below -8.
pub fn mills_ratio(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x == f64::INFINITY {
        return 0.0;
    }
    if x < -8.0 {
        // Φ(-x) is 1 up to a tiny correction here.
        let upper = (-0.5 * x * x).exp() / SQRT_2PI * mills_cf(-x);
        let phi_neg = 1.0 - upper;
        return (x * x * 0.5).exp() * SQRT_2PI * phi_neg;
    }
    if x <= 1.0 {
        mills_series(x)
    } else {
        mills_cf(x)
    }
}

// R(x) = sqrt(pi/2) e^{x^2/2} - sum_k x^{2k+1} / (2k+1)!!
fn mills_series(x: f64) -> f64 {
    let x2 = x * x;
    let lead = HALF_SQRT_2PI * (0.5 * x2).exp();
    let mut term = x;
    let mut sum = term;
    let mut k = 0.0;
    loop {
        k += 1.0;
        term *= x2 / (2.0 * k + 1.0);
        sum += term;
        if term.abs() <= 1e-17 * sum.abs() || k > 500.0 {
            break;
        }
    }
    lead - sum
}

// Modified Lentz evaluation of 1/(x + 1/(x + 2/(x + 3/(x + ...)))).
fn mills_cf(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for j in 1..20_000 {
        let a = j as f64;
        d = x + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = x + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    1.0 / f
}

/// Standard normal upper tail `P(X > x)`.
pub fn normal_tail(x: f64) -> f64 {
    if x < 0.0 {
        1.0 - normal_tail(-x)
    } else {
        (-0.5 * x * x).exp() / SQRT_2PI * mills_ratio(x)
    }
}

/// `log P(X > x)`, finite far into the tail.
pub fn log_normal_tail(x: f64) -> f64 {
    if x < 0.0 {
        normal_tail(x).ln()
    } else {
        -0.5 * x * x - SQRT_2PI.ln() + mills_ratio(x).ln()
    }
}

/// `r(δ, n) = (R(sqrt(2 log(1/δ) / n)) / sqrt(2π))^n`.
pub fn r_small(delta: f64, n: usize) -> f64 {
    let n_f = n as f64;
    let arg = (2.0 / n_f * (1.0 / delta).ln()).sqrt();
    (mills_ratio(arg) / SQRT_2PI).powi(n as i32)
}

/// Riemann ζ(s) for `s > 1`.
pub fn zeta(s: f64) -> f64 {
    if s == 2.0 {
        return PI * PI / 6.0;
    }
    assert!(s > 1.0, "zeta requires s > 1");
    // Euler-Maclaurin with N = 10 and six Bernoulli corrections.
    const N: usize = 10;
    const B: [f64; 6] = [
        1.0 / 6.0,
        -1.0 / 30.0,
        1.0 / 42.0,
        -1.0 / 30.0,
        5.0 / 66.0,
        -691.0 / 2730.0,
    ];
    let n = N as f64;
    let mut sum: f64 = (1..N).map(|k| (k as f64).powf(-s)).sum();
    sum += n.powf(1.0 - s) / (s - 1.0) + 0.5 * n.powf(-s);
    // rising factorial s (s+1) ... (s+2k-2) / (2k)!
    let mut rising = s;
    let mut fact = 2.0;
    let mut power = n.powf(-s - 1.0);
    for (k, b) in B.iter().enumerate() {
        sum += b / fact * rising * power;
        let k2 = 2.0 * (k as f64 + 1.0);
        rising *= (s + k2 - 1.0) * (s + k2);
        fact *= (k2 + 1.0) * (k2 + 2.0);
        power /= n * n;
    }
    sum
}

/// `W̄₋₁(x) = -W₋₁(-e^{-x})`: the root `w ≥ 1` of `w - ln w = x`.
pub fn lambert_wbar(x: f64) -> Result<f64> {
    if !(x >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "lambert_wbar needs x >= 1, got {x}"
        )));
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    if x.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let f = |w: f64| w - w.ln() - x;
    let (mut lo, mut hi) = (1.0_f64, x + x.ln() + 1.0);
    let mut w = if x - 1.0 < 1e-2 {
        // w - 1 ~ sqrt(2 (x - 1)) near the branch point
        let e = x - 1.0;
        1.0 + (2.0 * e).sqrt() + 2.0 * e / 3.0
    } else {
        x + x.ln()
    };
    for _ in 0..100 {
        let fw = f(w);
        if fw.abs() <= 1e-14 * x {
            break;
        }
        if fw > 0.0 {
            hi = hi.min(w);
        } else {
            lo = lo.max(w);
        }
        let step = fw / (1.0 - 1.0 / w);
        let mut next = w - step;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - w).abs() <= 1e-16 * w {
            w = next;
            break;
        }
        w = next;
    }
    Ok(w)
}

/// Which concentration threshold applies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Threshold {
    /// `K` arms of dimension `d`, peeling exponent `s`.
    Unstructured { arms: usize, dim: usize, s: f64 },
    /// Transductive linear threshold; `theta_radius` must be finite.
    Structured {
        dim: usize,
        features: usize,
        xi: f64,
        arm_norm: f64,
        theta_radius: f64,
        sigma_min_eig: f64,
    },
}

/// Anytime concentration threshold `β(t, δ)`.
///
/// `delta` may equal 1, which is how `f₁(t) = β(t, 1/t²)` is evaluated at `t = 1`.
pub fn beta_threshold(t: f64, delta: f64, threshold: &Threshold) -> Result<f64> {
    if !(delta > 0.0 && delta <= 1.0) || t < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "beta_threshold needs t >= 0 and delta in (0, 1], got t={t}, delta={delta}"
        )));
    }
    match *threshold {
        Threshold::Unstructured { arms, dim, s } => {
            let k = arms as f64;
            let d = dim as f64;
            let log_term = k * s + k * zeta(s).ln() + (1.0 / delta).ln();
            let ratio = (t / k).max(1.0);
            let arg = 2.0 / (d * k) * log_term
                + 2.0 * s / d * (1.0 + d / (2.0 * s) * ratio.ln()).ln()
                + 1.0;
            Ok(d * k / 2.0 * lambert_wbar(arg)?)
        }
        Threshold::Structured {
            dim,
            features,
            xi,
            arm_norm,
            theta_radius,
            sigma_min_eig,
        } => {
            if !theta_radius.is_finite() {
                return Err(Error::Unsupported(
                    "structured threshold needs a bounded parameter set".into(),
                ));
            }
            let d = dim as f64;
            let h = features as f64;
            let log_term =
                (1.0 / delta).ln() + d * h / 2.0 * (arm_norm * arm_norm * t / (h * xi) + 1.0).ln();
            let bias = (d * theta_radius * theta_radius / (2.0 * sigma_min_eig * xi)).sqrt();
            let root = log_term.sqrt() + bias;
            Ok(root * root)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationKind {
    Lemma2,
    Heuristic,
}

impl std::str::FromStr for CalibrationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lemma2" => Ok(Self::Lemma2),
            "heuristic" => Ok(Self::Heuristic),
            other => Err(Error::InvalidArgument(format!("unknown calibration {other}"))),
        }
    }
}

impl std::fmt::Display for CalibrationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Lemma2 => "lemma2",
            Self::Heuristic => "heuristic",
        })
    }
}

/// Setting selecting the `q(t, δ)` formula of the guaranteed calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Setting {
    UnstructuredDiag,
    UnstructuredCorr,
    BaiStructured,
}

/// Budget and inflation functions for the PS stopping rule plus the
/// concentration threshold used by GLR stopping and Estimate-and-Halve.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub kind: CalibrationKind,
    pub s: f64,
    pub setting: Option<Setting>,
    pub threshold: Threshold,
    dim: usize,
    /// ‖|Σ⁻¹|‖, the operator norm of the inverse covariance.
    pub sigma_bar: f64,
    /// ‖1_d‖² in the (σ̄Σ)⁻¹ norm.
    pub d_sigma: f64,
    /// det(σ̄Σ)^{-1/2}.
    pub det_factor: f64,
}

impl Calibration {
    pub fn for_instance(kind: CalibrationKind, instance: &Instance, xi: f64) -> Result<Self> {
        Self::with_s(kind, instance, xi, 2.0)
    }

    pub fn with_s(kind: CalibrationKind, instance: &Instance, xi: f64, s: f64) -> Result<Self> {
        if !(s > 1.0) {
            return Err(Error::InvalidArgument(format!("s must exceed 1, got {s}")));
        }
        let sigma = instance.sigma();
        let d = instance.dim();
        let eig = sigma.clone().symmetric_eigen();
        let min_eig = eig.eigenvalues.min();
        let sigma_bar = 1.0 / min_eig;
        let sigma_inv = instance.sigma_inv();
        let ones = DVector::from_element(d, 1.0);
        let d_sigma = (ones.transpose() * sigma_inv * &ones)[(0, 0)] / sigma_bar;
        let det_factor = (sigma * sigma_bar).determinant().powf(-0.5);

        let theta_radius = match instance.theta_constraint() {
            ThetaConstraint::Unbounded => f64::INFINITY,
            ThetaConstraint::Ball { radius } => radius,
        };
        let threshold = if instance.is_unstructured() {
            Threshold::Unstructured {
                arms: instance.n_arms(),
                dim: d,
                s,
            }
        } else {
            Threshold::Structured {
                dim: d,
                features: instance.n_features(),
                xi,
                arm_norm: instance.max_arm_norm(),
                theta_radius,
                sigma_min_eig: min_eig,
            }
        };

        let diagonal = is_diagonal(sigma);
        let setting = if instance.is_unstructured() {
            Some(if diagonal {
                Setting::UnstructuredDiag
            } else {
                Setting::UnstructuredCorr
            })
        } else if d == 1 {
            Some(Setting::BaiStructured)
        } else {
            None
        };
        if kind == CalibrationKind::Lemma2 {
            match setting {
                None => {
                    return Err(Error::Unsupported(
                        "no guaranteed calibration for structured PSI with d > 1".into(),
                    ))
                }
                Some(Setting::BaiStructured) => {
                    if theta_radius.is_finite() {
                        log::warn!(
                            "guaranteed BAI calibration assumes an unconstrained parameter set; \
                             the ball constraint voids the guarantee"
                        );
                    } else {
                        return Err(Error::Unsupported(
                            "structured threshold needs a ball-constrained parameter set".into(),
                        ));
                    }
                }
                _ => {}
            }
        }

        Ok(Self {
            kind,
            s,
            setting,
            threshold,
            dim: d,
            sigma_bar,
            d_sigma,
            det_factor,
        })
    }

    pub fn beta(&self, t: f64, delta: f64) -> Result<f64> {
        beta_threshold(t, delta, &self.threshold)
    }

    /// `q(t, δ)` of the guaranteed budget, evaluated with the current Pareto set size.
    pub fn q(&self, delta: f64, pareto_size: usize) -> f64 {
        let d = self.dim;
        let p = pareto_size;
        match self.setting {
            Some(Setting::UnstructuredDiag) | None => r_small(delta, d).min(r_small(delta, d + p)),
            Some(Setting::UnstructuredCorr) => {
                let df = d as f64;
                let pf = p as f64;
                let a = r_small(delta.powf(self.d_sigma / df), d);
                let b = r_small(delta.powf((self.d_sigma + pf) / (df + pf)), d + p);
                self.det_factor * a.min(b)
            }
            Some(Setting::BaiStructured) => r_small(delta, 1),
        }
    }

    /// Budget `M(t, δ)`: the number of posterior draws the stopping rule must
    /// see outside the alternative before it stops.
    pub fn budget(&self, t: u64, delta: f64, pareto_size: usize) -> Result<u64> {
        check_delta(delta)?;
        let t = t.max(1) as f64;
        let raw = match self.kind {
            CalibrationKind::Heuristic => (t / delta).ln() / delta,
            CalibrationKind::Lemma2 => {
                let num = (2.0 * t.powf(self.s) * zeta(self.s) / delta).ln();
                num / (delta * self.q(delta, pareto_size))
            }
        };
        Ok(raw.ceil().max(1.0).min(u64::MAX as f64) as u64)
    }

    /// Inflation `c(t, δ)` applied to the posterior covariance.
    pub fn inflation(&self, t: u64, delta: f64) -> Result<f64> {
        check_delta(delta)?;
        match self.kind {
            CalibrationKind::Heuristic => {
                let t = (t as f64).max(3.0);
                Ok(1.0 + t.ln().ln() / (1.0 / delta).ln())
            }
            CalibrationKind::Lemma2 => Ok(self.beta(t as f64, delta / 2.0)? / (1.0 / delta).ln()),
        }
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("delta must be in (0, 1), got {delta}")))
    }
}

pub(crate) fn is_diagonal(m: &DMatrix<f64>) -> bool {
    (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0))
}

/// Lower bound on the orthant probability `P(X ≥ x)` for `X ~ N(0, Σ)`:
/// `(2π)^{-d/2} det(σ̄Σ)^{-1/2} exp(-½ xᵀΣ⁻¹x) R(‖x‖_{Σ⁻¹} √d_Σ / d)^d`.
pub fn mvn_orthant_lower_bound(sigma: &DMatrix<f64>, x: &DVector<f64>) -> Result<f64> {
    let d = sigma.nrows();
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x.len(),
        });
    }
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("covariance is not positive definite".into()))?;
    let sigma_inv = chol.inverse();
    let sigma_bar = sigma_inv.clone().symmetric_eigen().eigenvalues.max();
    let ones = DVector::from_element(d, 1.0);
    let d_sigma = (ones.transpose() * &sigma_inv * &ones)[(0, 0)] / sigma_bar;
    let det = (sigma * sigma_bar).determinant();
    let quad = (x.transpose() * &sigma_inv * x)[(0, 0)];
    let df = d as f64;
    let arg = quad.sqrt() * d_sigma.sqrt() / df;
    Ok((2.0 * PI).powf(-df / 2.0)
        * det.powf(-0.5)
        * (-0.5 * quad).exp()
        * mills_ratio(arg).powi(d as i32))
}
