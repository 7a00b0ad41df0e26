//! Least-squares sufficient statistics and Gaussian posterior draws.
//!
//! The posterior over `vec(θ)` is `N(vec(θ̂), Σ ⊗ V⁻¹)`. Draws are formed as
//! `θ̂ + L_V G L_Σᵀ` with `G` an h×d standard normal matrix, so the hd×hd
//! covariance is never built.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::calibration::is_diagonal;
use crate::instance::Instance;
use crate::{Error, Result};

const REFRESH_EVERY: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Pull every arm once, `V₁ = I_K`.
    Unstructured,
    /// Start from `V₁ = ξ I_h` without pulls.
    Structured { xi: f64 },
}

#[derive(Debug, Clone)]
pub struct Estimator {
    arms: DMatrix<f64>,
    unstructured: bool,
    xi: f64,
    v: DMatrix<f64>,
    v_inv: DMatrix<f64>,
    zmom: DMatrix<f64>,
    theta_hat: DMatrix<f64>,
    counts: Vec<u64>,
    t: u64,
    since_refresh: u64,
    sigma: DMatrix<f64>,
    sigma_inv: DMatrix<f64>,
    sigma_chol: DMatrix<f64>,
    sampler: Option<CenteredSampler>,
}

impl Estimator {
    /// Fresh state; in unstructured mode every arm is pulled once through `observe`.
    pub fn init<F>(instance: &Instance, mode: Mode, mut observe: F) -> Result<Self>
    where
        F: FnMut(usize) -> Result<DVector<f64>>,
    {
        let mut est = Self::empty(instance, mode)?;
        if est.unstructured {
            for a in 0..instance.n_arms() {
                let x = observe(a)?;
                est.check_obs(&x)?;
                est.counts[a] = 1;
                est.v[(a, a)] = 1.0;
                est.v_inv[(a, a)] = 1.0;
                est.zmom.row_mut(a).copy_from(&x.transpose());
                est.theta_hat.row_mut(a).copy_from(&x.transpose());
                est.t += 1;
            }
        }
        Ok(est)
    }

    /// Initialize by drawing from the instance itself.
    pub fn init_sampling<R: Rng + ?Sized>(instance: &Instance, mode: Mode, rng: &mut R) -> Result<Self> {
        Self::init(instance, mode, |a| instance.draw_observation(a, rng))
    }

    fn empty(instance: &Instance, mode: Mode) -> Result<Self> {
        let h = instance.n_features();
        let d = instance.dim();
        let k = instance.n_arms();
        let (unstructured, xi) = match mode {
            Mode::Unstructured => {
                if !instance.is_unstructured() {
                    return Err(Error::InvalidArgument(
                        "unstructured mode needs identity features".into(),
                    ));
                }
                (true, 0.0)
            }
            Mode::Structured { xi } => {
                if !(xi > 0.0) {
                    return Err(Error::InvalidArgument(format!("xi must be positive, got {xi}")));
                }
                (false, xi)
            }
        };
        let v = if unstructured {
            DMatrix::zeros(h, h)
        } else {
            DMatrix::identity(h, h) * xi
        };
        let v_inv = if unstructured {
            DMatrix::zeros(h, h)
        } else {
            DMatrix::identity(h, h) / xi
        };
        Ok(Self {
            arms: instance.arms().clone(),
            unstructured,
            xi,
            v,
            v_inv,
            zmom: DMatrix::zeros(h, d),
            theta_hat: DMatrix::zeros(h, d),
            counts: vec![0; k],
            t: 0,
            since_refresh: 0,
            sigma: instance.sigma().clone(),
            sigma_inv: instance.sigma_inv().clone(),
            sigma_chol: instance.sigma_chol().clone(),
            sampler: None,
        })
    }

    /// Unstructured state with prescribed estimates and pull counts (all ≥ 1).
    pub fn from_means(instance: &Instance, theta_hat: DMatrix<f64>, counts: Vec<u64>) -> Result<Self> {
        let mut est = Self::empty(instance, Mode::Unstructured)?;
        if theta_hat.shape() != est.theta_hat.shape() || counts.len() != est.counts.len() {
            return Err(Error::DimensionMismatch {
                expected: est.counts.len(),
                got: counts.len(),
            });
        }
        if counts.contains(&0) {
            return Err(Error::InvalidArgument("every count must be positive".into()));
        }
        for (a, &n) in counts.iter().enumerate() {
            est.v[(a, a)] = n as f64;
            est.v_inv[(a, a)] = 1.0 / n as f64;
            let row = theta_hat.row(a) * n as f64;
            est.zmom.row_mut(a).copy_from(&row);
        }
        est.t = counts.iter().sum();
        est.counts = counts;
        est.theta_hat = theta_hat;
        Ok(est)
    }

    fn check_obs(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.theta_hat.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.theta_hat.ncols(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn update(&mut self, arm: usize, x: &DVector<f64>) -> Result<()> {
        if arm >= self.counts.len() {
            return Err(Error::IndexOutOfRange {
                index: arm,
                len: self.counts.len(),
            });
        }
        self.check_obs(x)?;
        self.counts[arm] += 1;
        self.t += 1;
        self.sampler = None;
        if self.unstructured {
            let n = self.counts[arm] as f64;
            self.v[(arm, arm)] = n;
            self.v_inv[(arm, arm)] = 1.0 / n;
            for c in 0..x.len() {
                self.zmom[(arm, c)] += x[c];
                let th = self.theta_hat[(arm, c)];
                self.theta_hat[(arm, c)] = th + (x[c] - th) / n;
            }
            return Ok(());
        }
        let a = self.arms.row(arm).transpose();
        let k = &self.v_inv * &a;
        let denom = 1.0 + a.dot(&k);
        self.v_inv.ger(-1.0 / denom, &k, &k, 1.0);
        let gain = k / denom;
        let resid = x - self.theta_hat.transpose() * &a;
        self.theta_hat.ger(1.0, &gain, &resid, 1.0);
        self.v.ger(1.0, &a, &a, 1.0);
        self.zmom.ger(1.0, &a, x, 1.0);
        self.since_refresh += 1;
        if self.since_refresh >= REFRESH_EVERY {
            self.refresh();
        }
        Ok(())
    }

    /// Recompute `V⁻¹` and `θ̂` by direct factorization.
    pub fn refresh(&mut self) {
        self.since_refresh = 0;
        if let Some(chol) = self.v.clone().cholesky() {
            self.v_inv = chol.inverse();
            self.theta_hat = &self.v_inv * &self.zmom;
        }
        self.sampler = None;
    }

    pub fn is_unstructured(&self) -> bool {
        self.unstructured
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn theta_hat(&self) -> &DMatrix<f64> {
        &self.theta_hat
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn v_inv(&self) -> &DMatrix<f64> {
        &self.v_inv
    }

    pub fn zmom(&self) -> &DMatrix<f64> {
        &self.zmom
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Number of observations so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn arms(&self) -> &DMatrix<f64> {
        &self.arms
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn sigma_inv(&self) -> &DMatrix<f64> {
        &self.sigma_inv
    }

    pub fn dim(&self) -> usize {
        self.theta_hat.ncols()
    }

    pub fn n_features(&self) -> usize {
        self.theta_hat.nrows()
    }

    /// `trace(Σ⁻¹ (θ̂−λ)ᵀ V (θ̂−λ))`.
    pub fn mahalanobis(&self, lambda: &DMatrix<f64>) -> f64 {
        let diff = &self.theta_hat - lambda;
        if self.unstructured {
            let mut total = 0.0;
            for a in 0..diff.nrows() {
                total += self.v[(a, a)] * quad_row(&self.sigma_inv, &diff, a);
            }
            return total;
        }
        let m = diff.transpose() * &self.v * &diff;
        self.sigma_inv.component_mul(&m).sum()
    }

    /// Per-arm gain `‖(θ̂−λ)ᵀ a‖²_{Σ⁻¹}` for every arm.
    pub fn arm_gains(&self, lambda: &DMatrix<f64>) -> Vec<f64> {
        let diff = &self.theta_hat - lambda;
        if self.unstructured {
            return (0..diff.nrows()).map(|a| quad_row(&self.sigma_inv, &diff, a)).collect();
        }
        let proj = &self.arms * diff;
        (0..proj.nrows()).map(|a| quad_row(&self.sigma_inv, &proj, a)).collect()
    }

    /// Build the cached factor of `V⁻¹` used by [`Estimator::sampler`].
    pub fn prepare_sampler(&mut self) {
        if self.sampler.is_some() {
            return;
        }
        let h = self.theta_hat.nrows();
        let v_factor = if self.unstructured {
            VFactor::Diag((0..h).map(|a| self.v_inv[(a, a)].sqrt()).collect())
        } else {
            let sym = (&self.v_inv + self.v_inv.transpose()) * 0.5;
            let l = sym
                .cholesky()
                .map(|c| c.unpack())
                .unwrap_or_else(|| {
                    // fall back to the factor of V itself
                    let lv = self.v.clone().cholesky().expect("design matrix is SPD").unpack();
                    lv.transpose().try_inverse().expect("triangular factor is invertible")
                });
            VFactor::Lower(l)
        };
        let sigma_diag = is_diagonal(&self.sigma_chol);
        self.sampler = Some(CenteredSampler {
            v_factor,
            sigma_chol: self.sigma_chol.clone(),
            sigma_diag,
            scratch: DMatrix::zeros(h, self.theta_hat.ncols()),
        });
    }

    /// Sampler for centered draws `v ~ N(0, Σ ⊗ V⁻¹)`; call [`Estimator::prepare_sampler`] first.
    pub fn sampler(&self) -> &CenteredSampler {
        self.sampler.as_ref().expect("prepare_sampler must run after each update")
    }

    /// `θ̂ + √scale · v` with `v ~ N(0, Σ ⊗ V⁻¹)`.
    pub fn posterior_draw<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) -> Result<DMatrix<f64>> {
        if !(scale >= 0.0) {
            return Err(Error::InvalidArgument(format!("scale must be non-negative, got {scale}")));
        }
        self.prepare_sampler();
        let mut out = DMatrix::zeros(self.theta_hat.nrows(), self.theta_hat.ncols());
        let mut sampler = self.sampler().clone();
        sampler.draw_into(rng, &mut out);
        out *= scale.sqrt();
        out += &self.theta_hat;
        Ok(out)
    }
}

// row a of m as a d-vector, quadratic form with s
#[inline]
fn quad_row(s: &DMatrix<f64>, m: &DMatrix<f64>, a: usize) -> f64 {
    let d = m.ncols();
    let mut total = 0.0;
    for i in 0..d {
        let mi = m[(a, i)];
        if mi == 0.0 {
            continue;
        }
        let mut inner = 0.0;
        for j in 0..d {
            inner += s[(i, j)] * m[(a, j)];
        }
        total += mi * inner;
    }
    total
}

#[derive(Debug, Clone)]
enum VFactor {
    Diag(Vec<f64>),
    Lower(DMatrix<f64>),
}

/// Draws of `L_V G L_Σᵀ`, i.e. centered `N(0, Σ ⊗ V⁻¹)` in h×d layout.
#[derive(Debug, Clone)]
pub struct CenteredSampler {
    v_factor: VFactor,
    sigma_chol: DMatrix<f64>,
    sigma_diag: bool,
    scratch: DMatrix<f64>,
}

impl CenteredSampler {
    pub fn draw_into<R: Rng + ?Sized>(&mut self, rng: &mut R, out: &mut DMatrix<f64>) {
        let (h, d) = self.scratch.shape();
        let g = &mut self.scratch;
        for j in 0..d {
            for i in 0..h {
                g[(i, j)] = rng.sample(StandardNormal);
            }
        }
        // left factor
        match &self.v_factor {
            VFactor::Diag(s) => {
                for j in 0..d {
                    for i in 0..h {
                        g[(i, j)] *= s[i];
                    }
                }
            }
            VFactor::Lower(l) => {
                // in place, bottom row first
                for j in 0..d {
                    for i in (0..h).rev() {
                        let mut acc = 0.0;
                        for k in 0..=i {
                            acc += l[(i, k)] * g[(k, j)];
                        }
                        g[(i, j)] = acc;
                    }
                }
            }
        }
        // right factor L_Σᵀ: out[i, c] = Σ_{c' ≤ c} g[i, c'] L[c, c']
        if self.sigma_diag {
            for c in 0..d {
                let s = self.sigma_chol[(c, c)];
                for i in 0..h {
                    out[(i, c)] = g[(i, c)] * s;
                }
            }
        } else {
            for c in 0..d {
                for i in 0..h {
                    let mut acc = 0.0;
                    for k in 0..=c {
                        acc += g[(i, k)] * self.sigma_chol[(c, k)];
                    }
                    out[(i, c)] = acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{NoiseKind, ThetaConstraint};
    use crate::rng::seeded;
    use rand::Rng;

    fn linear_instance(rng: &mut impl Rng) -> Instance {
        let a = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
        Instance::new(
            a,
            None,
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 0.8]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]),
            NoiseKind::Gaussian,
            ThetaConstraint::Unbounded,
        )
        .unwrap()
    }

    #[test]
    fn unstructured_init_counts() {
        let inst = Instance::rotation(3, 0.5).unwrap();
        let est = Estimator::init_sampling(&inst, Mode::Unstructured, &mut seeded(1)).unwrap();
        assert_eq!(est.counts(), &[1, 1, 1]);
        assert_eq!(est.t(), 3);
        assert_eq!(est.v(), &DMatrix::identity(3, 3));
    }

    #[test]
    fn structured_init_zero() {
        let inst = linear_instance(&mut seeded(2));
        let est = Estimator::init_sampling(&inst, Mode::Structured { xi: 1.0 }, &mut seeded(1)).unwrap();
        assert_eq!(est.theta_hat(), &DMatrix::zeros(2, 2));
        assert!(Estimator::init_sampling(&inst, Mode::Structured { xi: 0.0 }, &mut seeded(1)).is_err());
        assert!(Estimator::init_sampling(&inst, Mode::Unstructured, &mut seeded(1)).is_err());
    }

    #[test]
    fn vanishing_noise_init() {
        let inst = Instance::rotation(5, 1e-12).unwrap();
        let est = Estimator::init_sampling(&inst, Mode::Unstructured, &mut seeded(3)).unwrap();
        assert!((est.theta_hat() - inst.theta()).amax() < 1e-3);
    }

    #[test]
    fn sherman_morrison_closed_form() {
        let arms = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let inst = Instance::new(
            arms,
            Some(DMatrix::from_row_slice(1, 2, &[1.0, 1.0])),
            DMatrix::identity(2, 1),
            DMatrix::identity(1, 1),
            NoiseKind::Gaussian,
            ThetaConstraint::Unbounded,
        )
        .unwrap();
        let mut est = Estimator::init_sampling(&inst, Mode::Structured { xi: 1.0 }, &mut seeded(1)).unwrap();
        est.update(0, &DVector::from_element(1, 2.0)).unwrap();
        let want = DMatrix::from_diagonal(&DVector::from_column_slice(&[0.5, 1.0]));
        assert!((est.v_inv() - want).amax() < 1e-15);
        assert!((est.theta_hat()[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fifty_updates_match_dense_inverse() {
        let mut rng = seeded(4);
        let inst = linear_instance(&mut rng);
        let mut est = Estimator::init_sampling(&inst, Mode::Structured { xi: 1.0 }, &mut rng).unwrap();
        for _ in 0..50 {
            let a = rng.random_range(0..5);
            let x = inst.draw_observation(a, &mut rng).unwrap();
            est.update(a, &x).unwrap();
        }
        let dense = est.v().clone().try_inverse().unwrap();
        assert!((est.v_inv() - &dense).amax() < 1e-9);
        assert!((est.v_inv() * est.v() - DMatrix::identity(2, 2)).amax() < 1e-9);
        let direct = &dense * est.zmom();
        assert!((est.theta_hat() - direct).amax() < 1e-10);
        // V recomputed from counts
        let mut v = DMatrix::identity(2, 2);
        for (a, &n) in est.counts().iter().enumerate() {
            let row = inst.arms().row(a).transpose();
            v += &row * row.transpose() * n as f64;
        }
        assert!((v - est.v()).norm() < 1e-8);
    }

    #[test]
    fn unstructured_running_means() {
        let inst = Instance::rotation(4, 0.5).unwrap();
        let mut rng = seeded(5);
        let mut sums = DMatrix::zeros(4, 2);
        let mut est = Estimator::init(&inst, Mode::Unstructured, |a| {
            let x = inst.draw_observation(a, &mut rng)?;
            sums.row_mut(a).copy_from(&x.transpose());
            Ok(x)
        })
        .unwrap();
        for step in 0..400 {
            let a = step % 3;
            let x = inst.draw_observation(a, &mut rng).unwrap();
            for c in 0..2 {
                sums[(a, c)] += x[c];
            }
            est.update(a, &x).unwrap();
        }
        for a in 0..4 {
            let n = est.counts()[a] as f64;
            for c in 0..2 {
                assert!((est.theta_hat()[(a, c)] - sums[(a, c)] / n).abs() < 1e-12);
            }
        }
        // single-arm updates: ‖e_a‖²_{V⁻¹} = 1/(1+T)
        assert_eq!(est.counts()[3], 1);
        assert!((est.v_inv()[(0, 0)] - 1.0 / (1.0 + 134.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_scale_draw_is_theta_hat() {
        let inst = Instance::rotation(4, 0.5).unwrap();
        let mut est = Estimator::init_sampling(&inst, Mode::Unstructured, &mut seeded(1)).unwrap();
        let draw = est.posterior_draw(0.0, &mut seeded(2)).unwrap();
        assert_eq!(&draw, est.theta_hat());
        assert!(est.posterior_draw(-1.0, &mut seeded(2)).is_err());
        let a = est.posterior_draw(1.0, &mut seeded(7)).unwrap();
        let b = est.posterior_draw(1.0, &mut seeded(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn draw_covariance_is_kronecker() {
        let mut rng = seeded(6);
        let arms = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, 0.1, 1.0, 0.7, 0.7]);
        let inst = Instance::new(
            arms,
            None,
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.6]),
            NoiseKind::Gaussian,
            ThetaConstraint::Unbounded,
        )
        .unwrap();
        let mut est = Estimator::init_sampling(&inst, Mode::Structured { xi: 1.0 }, &mut rng).unwrap();
        for s in 0..6 {
            let x = inst.draw_observation(s % 3, &mut rng).unwrap();
            est.update(s % 3, &x).unwrap();
        }
        let scale = 2.0;
        let n = 100_000;
        let mut cov = DMatrix::zeros(4, 4);
        for _ in 0..n {
            let draw = est.posterior_draw(scale, &mut rng).unwrap() - est.theta_hat();
            // vec stacks columns
            let v = DVector::from_column_slice(draw.as_slice());
            cov += &v * v.transpose();
        }
        cov /= n as f64;
        let want = inst.sigma().kronecker(est.v_inv()) * scale;
        for i in 0..4 {
            for j in 0..4 {
                let tol = 0.03 * (want[(i, i)] * want[(j, j)]).sqrt();
                assert!((cov[(i, j)] - want[(i, j)]).abs() < tol, "({i},{j}) {} vs {}", cov[(i, j)], want[(i, j)]);
            }
        }
    }

    #[test]
    fn mahalanobis_cases() {
        let mut rng = seeded(8);
        let inst = Instance::two_arm(1.0, 2.0).unwrap();
        let est = Estimator::from_means(&inst, DMatrix::from_column_slice(2, 1, &[0.3, 1.0]), vec![7, 3]).unwrap();
        assert_eq!(est.mahalanobis(est.theta_hat()), 0.0);
        let lam = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert!((est.mahalanobis(&lam) - 7.0 * 0.09 / 2.0).abs() < 1e-12);

        let inst = linear_instance(&mut rng);
        let mut est = Estimator::init_sampling(&inst, Mode::Structured { xi: 1.0 }, &mut rng).unwrap();
        for s in 0..20 {
            let x = inst.draw_observation(s % 5, &mut rng).unwrap();
            est.update(s % 5, &x).unwrap();
        }
        let lam = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-2.0..2.0));
        let diff = est.theta_hat() - &lam;
        let v = DVector::from_column_slice(diff.as_slice());
        let h = inst.sigma_inv().kronecker(est.v());
        let want = (v.transpose() * h * &v)[(0, 0)];
        assert!((est.mahalanobis(&lam) - want).abs() < 1e-10 * want.max(1.0));
    }
}
