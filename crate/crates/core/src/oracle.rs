//! Best responses over the alternative set and the characteristic time.
//!
//! Each convex piece of `alt(S)` is an intersection of halfspaces
//! `uₖᵀ λ e_{cₖ} ≤ 0`. Projecting `θ` onto a piece in the metric
//! `H = Σ⁻¹ ⊗ V` is a small QP whose dual has Gram matrix
//! `G_kl = Σ[c_k, c_l] · u_kᵀ V⁻¹ u_l`; it is solved exactly by active-set
//! enumeration, or by Hildreth's coordinate ascent when a piece has many
//! constraints.

use nalgebra::{DMatrix, DVector};

use crate::estimator::Estimator;
use crate::instance::Instance;
use crate::learners::AdaHedge;
use crate::pareto::{alt_pieces, AltPiece, ParetoSet, PieceConstraint, DEFAULT_PIECE_BUDGET};
use crate::{Error, Result};

const ENUMERATE_MAX: usize = 8;
const WEIGHT_FLOOR: f64 = 1e-12;

/// Inverse design matrix `V⁻¹`.
#[derive(Debug, Clone)]
pub enum DesignInverse {
    /// Unstructured: `V = diag(w)`, stored as `1/w`.
    Diag(Vec<f64>),
    Full(DMatrix<f64>),
}

impl DesignInverse {
    /// `V = diag(w)` with weights floored away from zero.
    pub fn from_weights(w: &[f64]) -> Self {
        DesignInverse::Diag(w.iter().map(|&x| 1.0 / x.max(WEIGHT_FLOOR)).collect())
    }

    /// `(Σ_a w_a a aᵀ + ridge·I)⁻¹` for arm features `arms`.
    pub fn from_arm_weights(arms: &DMatrix<f64>, w: &[f64], ridge: f64) -> Result<Self> {
        let h = arms.ncols();
        let mut v = DMatrix::identity(h, h) * ridge;
        for (a, &wa) in w.iter().enumerate() {
            let row = arms.row(a).transpose();
            v.ger(wa, &row, &row, 1.0);
        }
        let inv = v
            .cholesky()
            .ok_or_else(|| Error::Degenerate("design matrix is singular".into()))?
            .inverse();
        Ok(DesignInverse::Full(inv))
    }

    pub fn from_estimator(est: &Estimator) -> Self {
        if est.is_unstructured() {
            DesignInverse::Diag(est.counts().iter().map(|&n| 1.0 / n as f64).collect())
        } else {
            DesignInverse::Full(est.v_inv().clone())
        }
    }

    fn as_matrix(&self) -> DMatrix<f64> {
        match self {
            DesignInverse::Diag(v) => DMatrix::from_diagonal(&DVector::from_column_slice(v)),
            DesignInverse::Full(m) => m.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BestResponse {
    pub lambda_star: DMatrix<f64>,
    /// `‖vec(θ − λ*)‖²_{Σ⁻¹⊗V}`.
    pub value: f64,
    pub piece: AltPiece,
}

/// Answer features and covariance shared by all best-response queries.
#[derive(Debug, Clone)]
pub struct Oracle {
    answers: DMatrix<f64>,
    unstructured: bool,
    sigma: DMatrix<f64>,
    budget: u128,
}

struct PieceSolution {
    value: f64,
    nu: Vec<f64>,
    cons: Vec<PieceConstraint>,
}

impl Oracle {
    pub fn new(instance: &Instance) -> Self {
        Self {
            answers: instance.answers().clone(),
            unstructured: instance.is_unstructured(),
            sigma: instance.sigma().clone(),
            budget: DEFAULT_PIECE_BUDGET,
        }
    }

    pub fn with_budget(mut self, budget: u128) -> Self {
        self.budget = budget;
        self
    }

    fn n_answers(&self) -> usize {
        self.answers.nrows()
    }

    // W = Z V⁻¹ Zᵀ
    fn answer_gram(&self, vinv: &DesignInverse) -> DMatrix<f64> {
        match (self.unstructured, vinv) {
            (true, DesignInverse::Diag(w)) => DMatrix::from_diagonal(&DVector::from_column_slice(w)),
            (_, _) => &self.answers * vinv.as_matrix() * self.answers.transpose(),
        }
    }

    /// `argmin_{λ ∈ alt(S)} ‖vec(θ − λ)‖²_{Σ⁻¹⊗V}`.
    pub fn best_response(&self, theta: &DMatrix<f64>, s: &ParetoSet, vinv: &DesignInverse) -> Result<BestResponse> {
        let pieces = alt_pieces(s, self.n_answers(), theta.ncols(), self.budget)?;
        self.best_over(theta, s, vinv, pieces)
    }

    /// Projection of `θ` onto the nearest demote piece of `alt(S)`.
    ///
    /// With fewer than two members there is nothing to demote and the
    /// (then small) full set of pieces is searched.
    pub fn nearest_demote(&self, theta: &DMatrix<f64>, s: &ParetoSet, vinv: &DesignInverse) -> Result<BestResponse> {
        if s.len() < 2 {
            return self.best_response(theta, s, vinv);
        }
        let idx = s.indices();
        let pieces = idx
            .iter()
            .flat_map(|&z| idx.iter().filter(move |&&x| x != z).map(move |&x| AltPiece::Demote { z, x }))
            .collect();
        self.best_over(theta, s, vinv, pieces)
    }

    fn best_over(
        &self,
        theta: &DMatrix<f64>,
        s: &ParetoSet,
        vinv: &DesignInverse,
        pieces: Vec<AltPiece>,
    ) -> Result<BestResponse> {
        let d = theta.ncols();
        if pieces.is_empty() {
            return Err(Error::Degenerate("alternative set is empty".into()));
        }
        let means = if self.unstructured {
            theta.clone()
        } else {
            &self.answers * theta
        };
        let w = self.answer_gram(vinv);
        let mut best: Option<(usize, PieceSolution)> = None;
        for (i, piece) in pieces.iter().enumerate() {
            let cons = piece.constraints(s, d);
            let cutoff = best.as_ref().map_or(f64::INFINITY, |(_, b)| b.value);
            if let Some(sol) = self.solve_piece(&means, &w, cons, cutoff) {
                if sol.value < cutoff {
                    best = Some((i, sol));
                }
            }
        }
        let (i, sol) = best.ok_or_else(|| Error::Degenerate("no piece solved".into()))?;
        let lambda_star = self.reconstruct(theta, vinv, &sol);
        Ok(BestResponse {
            lambda_star,
            value: sol.value,
            piece: pieces[i].clone(),
        })
    }

    fn gram(&self, w: &DMatrix<f64>, cons: &[PieceConstraint]) -> DMatrix<f64> {
        let m = cons.len();
        DMatrix::from_fn(m, m, |k, l| {
            let (a, b) = (cons[k].plus, cons[k].minus);
            let (c, e) = (cons[l].plus, cons[l].minus);
            let uvu = w[(a, c)] - w[(a, e)] - w[(b, c)] + w[(b, e)];
            self.sigma[(cons[k].coord, cons[l].coord)] * uvu
        })
    }

    // None when the piece's lower bound already exceeds `cutoff`
    fn solve_piece(
        &self,
        means: &DMatrix<f64>,
        w: &DMatrix<f64>,
        cons: Vec<PieceConstraint>,
        cutoff: f64,
    ) -> Option<PieceSolution> {
        let m = cons.len();
        let b: Vec<f64> = cons.iter().map(|c| c.value(means)).collect();
        if b.iter().all(|&x| x <= 0.0) {
            return Some(PieceSolution {
                value: 0.0,
                nu: vec![0.0; m],
                cons,
            });
        }
        let g = self.gram(w, &cons);
        let lower = (0..m)
            .filter(|&k| b[k] > 0.0 && g[(k, k)] > 0.0)
            .map(|k| b[k] * b[k] / g[(k, k)])
            .fold(0.0, f64::max);
        if lower >= cutoff {
            return None;
        }
        let nu = if m <= ENUMERATE_MAX {
            enumerate_active_sets(&g, &b).unwrap_or_else(|| hildreth(&g, &b))
        } else {
            hildreth(&g, &b)
        };
        let value = nu.iter().zip(&b).map(|(n, bk)| n * bk).sum::<f64>().max(0.0);
        Some(PieceSolution { value, nu, cons })
    }

    // λ = θ − V⁻¹ (Σ_k ν_k u_k e_{c_k}ᵀ) Σ
    fn reconstruct(&self, theta: &DMatrix<f64>, vinv: &DesignInverse, sol: &PieceSolution) -> DMatrix<f64> {
        let (h, d) = theta.shape();
        let mut acc = DMatrix::zeros(h, d);
        for (k, c) in sol.cons.iter().enumerate() {
            if sol.nu[k] == 0.0 {
                continue;
            }
            for i in 0..h {
                let u = self.answers[(c.plus, i)] - self.answers[(c.minus, i)];
                acc[(i, c.coord)] += sol.nu[k] * u;
            }
        }
        let left = match vinv {
            DesignInverse::Diag(v) => {
                let mut m = acc;
                for i in 0..h {
                    for j in 0..d {
                        m[(i, j)] *= v[i];
                    }
                }
                m
            }
            DesignInverse::Full(vi) => vi * acc,
        };
        theta - left * &self.sigma
    }

    /// `½ · inf_{λ∈alt(S)} ‖vec(θ̂ − λ)‖²_{Σ⁻¹⊗V_t}`.
    pub fn glr_infimum(&self, est: &Estimator, s: &ParetoSet) -> Result<f64> {
        let br = self.best_response(est.theta_hat(), s, &DesignInverse::from_estimator(est))?;
        Ok(0.5 * br.value)
    }
}

// first active set satisfying KKT; None if numerically no subset qualifies
fn enumerate_active_sets(g: &DMatrix<f64>, b: &[f64]) -> Option<Vec<f64>> {
    let m = b.len();
    let scale = 1.0 + b.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let tol = 1e-10 * scale;
    if b.iter().all(|&x| x <= tol) {
        return Some(vec![0.0; m]);
    }
    let mut subsets: Vec<u32> = (1..(1u32 << m)).collect();
    subsets.sort_by_key(|s| s.count_ones());
    for mask in subsets {
        let idx: Vec<usize> = (0..m).filter(|k| mask & (1 << k) != 0).collect();
        let ga = DMatrix::from_fn(idx.len(), idx.len(), |i, j| g[(idx[i], idx[j])]);
        let ba = DVector::from_fn(idx.len(), |i, _| b[idx[i]]);
        let Some(chol) = ga.cholesky() else { continue };
        let sol = chol.solve(&ba);
        if sol.iter().any(|&x| x < -tol) {
            continue;
        }
        let mut nu = vec![0.0; m];
        for (i, &k) in idx.iter().enumerate() {
            nu[k] = sol[i].max(0.0);
        }
        let feasible = (0..m).all(|j| {
            let gnu: f64 = (0..m).map(|k| g[(j, k)] * nu[k]).sum();
            b[j] - gnu <= tol
        });
        if feasible {
            return Some(nu);
        }
    }
    None
}

// coordinate ascent on max νᵀb − ½νᵀGν over ν ≥ 0
fn hildreth(g: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let m = b.len();
    let mut nu = vec![0.0; m];
    let mut gnu = vec![0.0; m];
    let scale = 1.0 + b.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    for _ in 0..200_000 {
        let mut change = 0.0f64;
        for k in 0..m {
            let gkk = g[(k, k)];
            if gkk <= 0.0 {
                continue;
            }
            let new = (nu[k] + (b[k] - gnu[k]) / gkk).max(0.0);
            let delta = new - nu[k];
            if delta != 0.0 {
                for j in 0..m {
                    gnu[j] += g[(j, k)] * delta;
                }
                nu[k] = new;
                change = change.max(delta.abs() * gkk);
            }
        }
        if change < 1e-14 * scale {
            break;
        }
    }
    nu
}

#[derive(Debug, Clone)]
pub struct CharacteristicTime {
    pub t_star: f64,
    pub w_star: Vec<f64>,
    pub iterations: usize,
    /// Upper bound minus achieved value of the game, both in `2/T*` units.
    pub duality_gap_estimate: f64,
    pub converged: bool,
}

/// `T*(θ)` and `w*(θ)` by AdaHedge over arms against exact best responses.
///
/// Stops early once the relative duality gap drops below `tol`.
pub fn characteristic_time(instance: &Instance, max_iters: usize, tol: f64) -> Result<CharacteristicTime> {
    let s = instance.pareto_set();
    if instance.gaps().is_degenerate() {
        return Err(Error::Degenerate("Pareto set is not unique".into()));
    }
    let oracle = Oracle::new(instance);
    let theta = instance.theta();
    let k = instance.n_arms();
    let arms = instance.arms();
    let sigma_inv = instance.sigma_inv();
    let design = |w: &[f64]| -> Result<DesignInverse> {
        if instance.is_unstructured() {
            Ok(DesignInverse::from_weights(w))
        } else {
            DesignInverse::from_arm_weights(arms, w, 1e-12)
        }
    };
    let value_at = |w: &[f64]| -> Result<f64> { Ok(oracle.best_response(theta, &s, &design(w)?)?.value) };

    let mut hedge = AdaHedge::new(k);
    let mut w_sum = vec![0.0; k];
    let mut gain_sum = vec![0.0; k];
    let mut iterations = 0;
    let mut converged = false;
    let mut gap = f64::INFINITY;
    let mut value = 0.0;
    let check_every = 250.max(max_iters / 20);
    for it in 1..=max_iters {
        let w = hedge.weights().to_vec();
        let br = oracle.best_response(theta, &s, &design(&w)?)?;
        let diff = theta - &br.lambda_star;
        let proj = arms * &diff;
        let gains: Vec<f64> = (0..k)
            .map(|a| {
                let r = proj.row(a).transpose();
                (r.transpose() * sigma_inv * &r)[(0, 0)]
            })
            .collect();
        hedge.feed(&gains)?;
        for a in 0..k {
            w_sum[a] += w[a];
            gain_sum[a] += gains[a];
        }
        iterations = it;
        if it % check_every == 0 || it == max_iters {
            let avg: Vec<f64> = w_sum.iter().map(|x| x / it as f64).collect();
            value = value_at(&avg)?;
            let upper = gain_sum.iter().fold(0.0f64, |m, g| m.max(g / it as f64));
            gap = (upper - value).max(0.0);
            if gap <= tol * value {
                converged = true;
                break;
            }
        }
    }
    let w_star: Vec<f64> = w_sum.iter().map(|x| x / iterations as f64).collect();
    if !(value > 0.0) {
        return Err(Error::Degenerate("game value is zero".into()));
    }
    Ok(CharacteristicTime {
        t_star: 2.0 / value,
        w_star,
        iterations,
        duality_gap_estimate: gap,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{NoiseKind, ThetaConstraint};
    use crate::pareto::in_alt;
    use crate::rng::seeded;
    use rand::Rng;

    #[test]
    fn bai_pooling() {
        let inst = Instance::two_arm(1.0, 1.0).unwrap();
        let oracle = Oracle::new(&inst);
        let s = inst.pareto_set();
        let br = oracle
            .best_response(inst.theta(), &s, &DesignInverse::from_weights(&[0.5, 0.5]))
            .unwrap();
        assert!((br.value - 0.25).abs() < 1e-12);
        assert!((br.lambda_star[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((br.lambda_star[(1, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn glr_two_point_closed_form() {
        let inst = Instance::two_arm(1.0, 1.0).unwrap();
        let est = Estimator::from_means(&inst, DMatrix::from_column_slice(2, 1, &[0.0, 1.0]), vec![10, 10]).unwrap();
        let glr = Oracle::new(&inst).glr_infimum(&est, &inst.pareto_set()).unwrap();
        assert!((glr - 2.5).abs() < 1e-12);
        let tied = Estimator::from_means(&inst, DMatrix::from_column_slice(2, 1, &[1.0, 1.0]), vec![10, 10]).unwrap();
        let s = crate::pareto::pareto_set(tied.theta_hat());
        assert_eq!(Oracle::new(&inst).glr_infimum(&tied, &s).unwrap(), 0.0);
    }

    #[test]
    fn demote_piece_already_satisfied() {
        // S given as {0, 1} although 0 ≺ 1: the demote piece holds at θ
        let means = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 1.0, -1.0, 2.0]);
        let inst = Instance::unstructured(means, DMatrix::identity(2, 2), NoiseKind::Gaussian).unwrap();
        let s = ParetoSet::new(vec![0, 1]);
        let br = Oracle::new(&inst)
            .best_response(inst.theta(), &s, &DesignInverse::from_weights(&[1.0; 3]))
            .unwrap();
        assert_eq!(br.value, 0.0);
        assert_eq!(&br.lambda_star, inst.theta());
    }

    #[test]
    fn best_response_lies_in_alt_and_matches_metric() {
        let mut rng = seeded(10);
        for trial in 0..50 {
            let k = 3 + trial % 3;
            let means = DMatrix::from_fn(k, 2, |_, _| rng.random_range(-1.0..1.0));
            let rho = rng.random_range(-0.8..0.8);
            let sigma = Instance::correlated_sigma(rho, 0.5);
            let inst = Instance::unstructured(means, sigma, NoiseKind::Gaussian).unwrap();
            let s = inst.pareto_set();
            let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
            let br = Oracle::new(&inst)
                .best_response(inst.theta(), &s, &DesignInverse::from_weights(&w))
                .unwrap();
            // nudge past the boundary to test membership
            let nudged = inst.theta() + (&br.lambda_star - inst.theta()) * (1.0 + 1e-7);
            assert!(in_alt(&nudged, &s), "trial {trial}");
            let diff = inst.theta() - &br.lambda_star;
            let mut val = 0.0;
            for a in 0..k {
                let r = diff.row(a).transpose();
                val += w[a] * (r.transpose() * inst.sigma_inv() * &r)[(0, 0)];
            }
            assert!((val - br.value).abs() < 1e-9 * (1.0 + val));
        }
    }

    #[test]
    fn structured_best_response_in_alt() {
        let mut rng = seeded(12);
        for _ in 0..20 {
            let arms = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
            let theta = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
            let inst = Instance::new(
                arms.clone(),
                None,
                theta,
                Instance::correlated_sigma(0.3, 1.0),
                NoiseKind::Gaussian,
                ThetaConstraint::Unbounded,
            )
            .unwrap();
            let s = inst.pareto_set();
            let vinv = DesignInverse::from_arm_weights(&arms, &[0.2; 5], 0.0).unwrap();
            let br = Oracle::new(&inst).best_response(inst.theta(), &s, &vinv).unwrap();
            let nudged = inst.theta() + (&br.lambda_star - inst.theta()) * (1.0 + 1e-7);
            assert!(in_alt(&(&arms * &nudged), &s));
        }
    }

    #[test]
    fn nearest_demote_bounds_best_response() {
        let inst = Instance::covboost();
        let s = inst.pareto_set();
        let vinv = DesignInverse::from_weights(&[0.05; 20]);
        let oracle = Oracle::new(&inst);
        let br = oracle.best_response(inst.theta(), &s, &vinv).unwrap();
        let dm = oracle.nearest_demote(inst.theta(), &s, &vinv).unwrap();
        assert!(matches!(dm.piece, AltPiece::Demote { .. }));
        assert!(dm.value >= br.value - 1e-12);
        let nudged = inst.theta() + (&dm.lambda_star - inst.theta()) * (1.0 + 1e-9);
        assert!(in_alt(&nudged, &s));
    }

    #[test]
    fn hildreth_agrees_with_enumeration() {
        let mut rng = seeded(13);
        for _ in 0..100 {
            let m = 4;
            let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
            let g = &a * a.transpose() + DMatrix::identity(m, m) * 0.1;
            let b: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let e = enumerate_active_sets(&g, &b).unwrap();
            let h = hildreth(&g, &b);
            let ve: f64 = e.iter().zip(&b).map(|(x, y)| x * y).sum();
            let vh: f64 = h.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((ve - vh).abs() < 1e-8, "{ve} {vh}");
        }
    }

    #[test]
    fn characteristic_time_bai() {
        let inst = Instance::two_arm(1.0, 1.0).unwrap();
        let ct = characteristic_time(&inst, 5000, 0.0).unwrap();
        assert!((ct.t_star - 8.0).abs() < 0.16, "T* = {}", ct.t_star);
        assert!((ct.w_star[0] - 0.5).abs() < 0.01);
        let scaled = characteristic_time(&Instance::two_arm(1.0, 4.0).unwrap(), 5000, 0.0).unwrap();
        assert!((scaled.t_star / ct.t_star - 4.0).abs() < 0.04);
    }

    #[test]
    fn glr_doubles_with_counts() {
        let inst = Instance::rotation(5, 0.5).unwrap();
        let mut rng = seeded(3);
        let th = inst.theta() + DMatrix::from_fn(5, 2, |_, _| rng.random_range(-0.1..0.1));
        let s = crate::pareto::pareto_set(&th);
        let oracle = Oracle::new(&inst);
        let e1 = Estimator::from_means(&inst, th.clone(), vec![3, 5, 2, 7, 4]).unwrap();
        let e2 = Estimator::from_means(&inst, th, vec![6, 10, 4, 14, 8]).unwrap();
        let g1 = oracle.glr_infimum(&e1, &s).unwrap();
        let g2 = oracle.glr_infimum(&e2, &s).unwrap();
        assert!((g2 - 2.0 * g1).abs() < 1e-10 * g2);
    }
}
