use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use psi_core::calibration::mvn_orthant_lower_bound;
use psi_core::estimator::Estimator;
use psi_core::instance::NoiseKind;
use psi_core::oracle::{characteristic_time, DesignInverse, Oracle};
use psi_core::pareto::{alt_pieces, in_alt, pareto_set, AltPiece};
use psi_core::rng::seeded;
use psi_core::Instance;

fn random_spd<R: Rng>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let m = &a * a.transpose() + DMatrix::identity(d, d) * 0.2;
    // exact symmetry for the instance validator
    (&m + m.transpose()) * 0.5
}

#[test]
fn orthant_bound_below_monte_carlo() {
    let mut rng = seeded(5);
    let n = 200_000;
    for case in 0..100 {
        let d = 2 + case % 2;
        let sigma = random_spd(d, &mut rng);
        let x = DVector::from_fn(d, |_, _| rng.random_range(-0.5..1.5));
        let bound = mvn_orthant_lower_bound(&sigma, &x).unwrap();
        let l = sigma.clone().cholesky().unwrap().unpack();
        let mut hits = 0u64;
        for _ in 0..n {
            let g = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = &l * g;
            if (0..d).all(|i| y[i] >= x[i]) {
                hits += 1;
            }
        }
        let p = hits as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt().max(1.0 / n as f64);
        assert!(bound <= p + 4.0 * se, "case {case}: bound {bound} > mc {p}");
    }
}

#[test]
fn posterior_alt_mass_below_glr_bound() {
    let mut rng = seeded(9);
    let draws = 20_000;
    for case in 0..50 {
        let (k, d) = (3 + case % 2, 2);
        let means = DMatrix::from_fn(k, d, |_, _| rng.random_range(-1.0..1.0));
        let sigma = random_spd(d, &mut rng) * 0.5;
        let inst = Instance::unstructured(means.clone(), sigma, NoiseKind::Gaussian).unwrap();
        let counts: Vec<u64> = (0..k).map(|_| rng.random_range(1..30)).collect();
        let mut est = Estimator::from_means(&inst, means.clone(), counts).unwrap();
        let s = pareto_set(&means);
        let glr = Oracle::new(&inst).glr_infimum(&est, &s).unwrap();
        let alpha = alt_pieces(&s, k, d, u128::MAX).unwrap().len() as f64 / 2.0;
        let bound = alpha * (-glr).exp();
        let mut hits = 0u64;
        for _ in 0..draws {
            let lam = est.posterior_draw(1.0, &mut rng).unwrap();
            if in_alt(&lam, &s) {
                hits += 1;
            }
        }
        let p = hits as f64 / draws as f64;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        assert!(p <= bound + 4.0 * se, "case {case}: mc {p} > bound {bound}");
    }
}

// For diagonal Σ every piece splits into independent one-dimensional problems
// per coordinate, each a minimization over the common meeting value u.
fn piece_value_by_grid(theta: &DMatrix<f64>, n: &[f64], var: &[f64], s: &[usize], piece: &AltPiece) -> f64 {
    let d = theta.ncols();
    let grid: Vec<f64> = (0..=40_000).map(|i| -2.0 + 1e-4 * i as f64).collect();
    let line_min = |cost: &dyn Fn(f64) -> f64| grid.iter().map(|&u| cost(u)).fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    match piece {
        AltPiece::Demote { z, x } => {
            for c in 0..d {
                if theta[(*z, c)] > theta[(*x, c)] {
                    let cost = |u: f64| {
                        (n[*z] * (theta[(*z, c)] - u).powi(2) + n[*x] * (theta[(*x, c)] - u).powi(2)) / var[c]
                    };
                    total += line_min(&cost);
                }
            }
        }
        AltPiece::Promote { z, coords } => {
            for c in 0..d {
                let members: Vec<usize> = s.iter().zip(coords).filter(|(_, &cc)| cc == c).map(|(&x, _)| x).collect();
                if members.is_empty() {
                    continue;
                }
                let cost = |u: f64| {
                    let mut v = n[*z] * (theta[(*z, c)] - u).powi(2);
                    for &x in &members {
                        v += n[x] * (theta[(x, c)] - u).max(0.0).powi(2);
                    }
                    v / var[c]
                };
                total += line_min(&cost);
            }
        }
    }
    total
}

#[test]
fn glr_matches_grid_search() {
    let mut rng = seeded(21);
    for case in 0..40 {
        let means = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let var = [rng.random_range(0.3..2.0), rng.random_range(0.3..2.0)];
        let sigma = DMatrix::from_diagonal(&DVector::from_column_slice(&var));
        let inst = Instance::unstructured(means.clone(), sigma, NoiseKind::Gaussian).unwrap();
        let counts: Vec<u64> = (0..3).map(|_| rng.random_range(1..20)).collect();
        let est = Estimator::from_means(&inst, means.clone(), counts.clone()).unwrap();
        let s = pareto_set(&means);
        let glr = Oracle::new(&inst).glr_infimum(&est, &s).unwrap();
        let n: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let grid = alt_pieces(&s, 3, 2, u128::MAX)
            .unwrap()
            .iter()
            .map(|p| piece_value_by_grid(&means, &n, &var, s.indices(), p))
            .fold(f64::INFINITY, f64::min);
        let want = 0.5 * grid;
        assert!((glr - want).abs() <= 1e-3 * want.max(1.0), "case {case}: {glr} vs {want}");
    }
}

#[test]
fn best_response_on_piece_closure_and_minimal() {
    let mut rng = seeded(33);
    for case in 0..30 {
        let (k, d) = (4, 2 + case % 2);
        let means = DMatrix::from_fn(k, d, |_, _| rng.random_range(-1.0..1.0));
        let sigma = random_spd(d, &mut rng);
        let inst = Instance::unstructured(means.clone(), sigma.clone(), NoiseKind::Gaussian).unwrap();
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let s = pareto_set(&means);
        let vinv = DesignInverse::from_weights(&w);
        let br = Oracle::new(&inst).best_response(&means, &s, &vinv).unwrap();
        assert!(br.piece.contains(&br.lambda_star, &s, 1e-9));
        // random points of alt never beat the best response
        let sigma_inv = sigma.try_inverse().unwrap();
        for _ in 0..2000 {
            let lam = &means + DMatrix::from_fn(k, d, |_, _| rng.random_range(-1.0..1.0));
            if !in_alt(&lam, &s) {
                continue;
            }
            let diff = &means - &lam;
            let value: f64 = (0..k)
                .map(|a| w[a] * (diff.row(a) * &sigma_inv * diff.row(a).transpose())[(0, 0)])
                .sum();
            assert!(br.value <= value + 1e-9, "case {case}");
        }
    }
}

#[test]
fn best_response_invariant_under_outside_permutation() {
    let mut rng = seeded(44);
    for _ in 0..20 {
        let means = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
        let inst = Instance::unstructured(means.clone(), DMatrix::identity(2, 2), NoiseKind::Gaussian).unwrap();
        let w: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..1.0)).collect();
        let s = pareto_set(&means);
        let oracle = Oracle::new(&inst);
        let br = oracle.best_response(&means, &s, &DesignInverse::from_weights(&w)).unwrap();
        let involved: Vec<usize> = match &br.piece {
            AltPiece::Demote { z, x } => vec![*z, *x],
            AltPiece::Promote { z, .. } => {
                let mut v = s.indices().to_vec();
                v.push(*z);
                v
            }
        };
        let outside: Vec<usize> = (0..6).filter(|a| !involved.contains(a)).collect();
        if outside.len() < 2 {
            continue;
        }
        // swap two non-involved arms, along with their weights
        let (a, b) = (outside[0], outside[1]);
        let mut m2 = means.clone();
        m2.swap_rows(a, b);
        let mut w2 = w.clone();
        w2.swap(a, b);
        let s2 = pareto_set(&m2);
        let br2 = oracle.best_response(&m2, &s2, &DesignInverse::from_weights(&w2)).unwrap();
        assert!((br.value - br2.value).abs() <= 1e-10 * br.value.max(1.0));
    }
}

#[test]
fn characteristic_time_two_arm_and_homogeneity() {
    let inst = Instance::two_arm(1.0, 1.0).unwrap();
    let ct = characteristic_time(&inst, 5000, 1e-9).unwrap();
    assert!((ct.t_star - 8.0).abs() <= 0.16, "{}", ct.t_star);
    assert!(ct.w_star.iter().all(|w| (w - 0.5).abs() <= 0.01));
    let scaled = inst.with_sigma(DMatrix::from_element(1, 1, 4.0)).unwrap();
    let ct4 = characteristic_time(&scaled, 5000, 1e-9).unwrap();
    assert!((ct4.t_star / ct.t_star - 4.0).abs() <= 0.04);
}

#[test]
fn characteristic_time_weak_duality() {
    let inst = Instance::rotation(5, 1.0).unwrap();
    let ct = characteristic_time(&inst, 5000, 1e-9).unwrap();
    assert!((ct.w_star.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let s = inst.pareto_set();
    let oracle = Oracle::new(&inst);
    let at_w = oracle
        .best_response(&inst.arm_means(), &s, &DesignInverse::from_weights(&ct.w_star))
        .unwrap()
        .value;
    // inf at the averaged weights never exceeds the sup 2/T*
    assert!(at_w <= 2.0 / ct.t_star * (1.0 + 1e-9) + ct.duality_gap_estimate);
    // uniform weights are feasible too
    let uniform = oracle
        .best_response(&inst.arm_means(), &s, &DesignInverse::from_weights(&[0.2; 5]))
        .unwrap()
        .value;
    assert!(uniform <= 2.0 / ct.t_star + ct.duality_gap_estimate);
}
