use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use psi_core::calibration::{lambert_wbar, mills_ratio};
use psi_core::estimator::{Estimator, Mode};
use psi_core::instance::{NoiseKind, ThetaConstraint};
use psi_core::learners::{mix_forced_exploration, AdaHedge};
use psi_core::pareto::{alt_pieces, in_alt, pareto_set, pareto_set_2d, pareto_set_scan, piece_count};
use psi_core::Instance;

fn brute_pareto(m: &DMatrix<f64>) -> Vec<usize> {
    let (n, d) = m.shape();
    let beats = |x: usize, z: usize| {
        (0..d).all(|c| m[(x, c)] >= m[(z, c)]) && (0..d).any(|c| m[(x, c)] > m[(z, c)])
    };
    (0..n).filter(|&z| (0..n).all(|x| !beats(x, z))).collect()
}

fn matrix(n: usize, d: usize, lo: f64, hi: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(lo..hi, n * d).prop_map(move |v| DMatrix::from_row_slice(n, d, &v))
}

fn sized_matrix(max_n: usize, max_d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (1..=max_n, 1..=max_d).prop_flat_map(|(n, d)| matrix(n, d, -1.0, 1.0))
}

// small integer grid so that ties show up
fn grid_matrix(max_n: usize, max_d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (1..=max_n, 1..=max_d).prop_flat_map(|(n, d)| {
        prop::collection::vec(0..3i32, n * d)
            .prop_map(move |v| DMatrix::from_iterator(d, n, v.into_iter().map(f64::from)).transpose())
    })
}

fn theta_and_lambda() -> impl Strategy<Value = (DMatrix<f64>, DMatrix<f64>)> {
    (2..=5usize, 1..=3usize).prop_flat_map(|(n, d)| (matrix(n, d, -1.0, 1.0), matrix(n, d, -1.0, 1.0)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn pareto_matches_brute_force(m in sized_matrix(8, 4)) {
        prop_assert_eq!(pareto_set(&m).indices().to_vec(), brute_pareto(&m));
    }

    #[test]
    fn pareto_matches_brute_force_with_ties(m in grid_matrix(8, 3)) {
        prop_assert_eq!(pareto_set(&m).indices().to_vec(), brute_pareto(&m));
    }

    #[test]
    fn planar_sweep_equals_scan(m in (1..30usize).prop_flat_map(|n| matrix(n, 2, -1.0, 1.0))) {
        prop_assert_eq!(pareto_set_2d(&m), pareto_set_scan(&m));
    }

    #[test]
    fn planar_sweep_equals_scan_with_ties(m in grid_matrix(12, 2).prop_filter("planar", |m| m.ncols() == 2)) {
        prop_assert_eq!(pareto_set_2d(&m), pareto_set_scan(&m));
    }

    #[test]
    fn in_alt_iff_pareto_set_changes((theta, lambda) in theta_and_lambda()) {
        let s = pareto_set(&theta);
        prop_assert_eq!(in_alt(&lambda, &s), pareto_set(&lambda) != s);
    }

    #[test]
    fn in_alt_iff_pareto_set_changes_on_grid(theta in grid_matrix(5, 3), seed in any::<u64>()) {
        let (n, d) = theta.shape();
        let mut state = seed;
        let lambda = DMatrix::from_fn(n, d, |_, _| {
            state = psi_core::rng::splitmix64(state);
            (state % 3) as f64
        });
        let s = pareto_set(&theta);
        prop_assert_eq!(in_alt(&lambda, &s), pareto_set(&lambda) != s);
    }

    #[test]
    fn pieces_cover_alt((theta, lambda) in theta_and_lambda()) {
        let (n, d) = theta.shape();
        let s = pareto_set(&theta);
        let pieces = alt_pieces(&s, n, d, u128::MAX).unwrap();
        let in_some = pieces.iter().any(|p| p.contains(&lambda, &s, 0.0));
        prop_assert_eq!(in_some, in_alt(&lambda, &s));
    }

    #[test]
    fn piece_count_formula(theta in sized_matrix(6, 3)) {
        let (n, d) = theta.shape();
        let s = pareto_set(&theta);
        let p = s.len();
        let pieces = alt_pieces(&s, n, d, u128::MAX).unwrap();
        let expected = p * (p - 1) + (n - p) * d.pow(p as u32);
        prop_assert_eq!(pieces.len(), expected);
        prop_assert_eq!(piece_count(p, n, d), Some(expected as u128));
    }

    #[test]
    fn pareto_invariant_under_non_member_permutation(m in sized_matrix(7, 3), seed in any::<u64>()) {
        let s = pareto_set(&m);
        let mut others = s.complement(m.nrows());
        // Fisher-Yates with splitmix
        let mut state = seed;
        for i in (1..others.len()).rev() {
            state = psi_core::rng::splitmix64(state);
            others.swap(i, (state % (i as u64 + 1)) as usize);
        }
        let slots = s.complement(m.nrows());
        let mut permuted = m.clone();
        for (&dst, &src) in slots.iter().zip(&others) {
            permuted.row_mut(dst).copy_from(&m.row(src));
        }
        prop_assert_eq!(pareto_set(&permuted), s);
    }

    #[test]
    fn pareto_invariant_under_dominated_insertion(m in sized_matrix(7, 3), pick in any::<prop::sample::Index>(), shrink in 0.01..1.0f64) {
        let s = pareto_set(&m);
        let src = pick.index(m.nrows());
        let mut grown = m.clone().insert_row(m.nrows(), 0.0);
        for c in 0..m.ncols() {
            grown[(m.nrows(), c)] = m[(src, c)] - shrink;
        }
        prop_assert_eq!(pareto_set(&grown), s);
    }

    #[test]
    fn mills_log_convex(xs in prop::collection::vec(-5.0..20.0f64, 2..6)) {
        let p = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / p;
        let lhs = p * mills_ratio(mean).ln();
        let rhs: f64 = xs.iter().map(|&x| mills_ratio(x).ln()).sum();
        prop_assert!(lhs <= rhs + 1e-12 * rhs.abs().max(1.0), "lhs={} rhs={}", lhs, rhs);
    }

    #[test]
    fn adahedge_weights_on_simplex_and_track_leader(gains in prop::collection::vec(prop::collection::vec(0.0..5.0f64, 4), 1..40)) {
        let mut hedge = AdaHedge::new(4);
        let mut cum = [0.0; 4];
        for g in &gains {
            hedge.feed(g).unwrap();
            for (c, x) in cum.iter_mut().zip(g) {
                *c += x;
            }
            let w = hedge.weights();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&x| x > 0.0));
            let lead = cum.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let wmax = w.iter().cloned().fold(0.0, f64::max);
            for a in 0..4 {
                if cum[a] == lead {
                    prop_assert!((w[a] - wmax).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn forced_exploration_floor(raw in prop::collection::vec(0.0..1.0f64, 5), t in 1u64..1_000_000, alpha in 0.05..0.5f64) {
        let total: f64 = raw.iter().sum::<f64>() + 1e-9;
        let omega: Vec<f64> = raw.iter().map(|x| (x + 1e-9 / 5.0) / total).collect();
        let uniform = vec![0.2; 5];
        let w = mix_forced_exploration(&omega, t, alpha, &uniform);
        let gamma = (t as f64).powf(-alpha);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| x >= gamma * 0.2 * (1.0 - 1e-12)));
    }

    #[test]
    fn mahalanobis_midpoint_convex(a in matrix(3, 2, -2.0, 2.0), b in matrix(3, 2, -2.0, 2.0), counts in prop::collection::vec(1u64..50, 3)) {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let inst = Instance::unstructured(DMatrix::zeros(3, 2), sigma, NoiseKind::Gaussian).unwrap();
        let est = Estimator::from_means(&inst, DMatrix::zeros(3, 2), counts).unwrap();
        let mid = (&a + &b) * 0.5;
        let lhs = est.mahalanobis(&mid);
        let rhs = 0.5 * est.mahalanobis(&a) + 0.5 * est.mahalanobis(&b);
        prop_assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-12);
    }
}

#[test]
fn mills_strictly_decreasing_on_grid() {
    let grid: Vec<f64> = (0..=4000).map(|i| -20.0 + 0.01 * i as f64).collect();
    for w in grid.windows(2) {
        assert!(mills_ratio(w[1]) < mills_ratio(w[0]), "x={}", w[1]);
    }
}

#[test]
fn mills_lower_bound_on_grid() {
    for i in 0..=10_000 {
        let x = 0.005 * i as f64;
        let bound = 2.0 / (x + (x * x + 4.0).sqrt());
        assert!(mills_ratio(x) >= bound * (1.0 - 1e-13), "x={x}");
    }
}

#[test]
fn lambert_bounds_and_residual_on_grid() {
    let mut x = 1.01;
    while x <= 1000.0 {
        let w = lambert_wbar(x).unwrap();
        let lower = x + x.ln();
        let upper = x + x.ln() + 0.5f64.min(1.0 / x.sqrt());
        assert!(w >= lower - 1e-12 * x && w <= upper + 1e-12 * x, "x={x} w={w}");
        assert!((w - w.ln() - x).abs() <= 1e-12 * x, "residual at x={x}");
        x *= 1.01;
    }
}

#[test]
fn sherman_morrison_fifty_updates() {
    use rand::Rng;
    let mut rng = psi_core::rng::seeded(11);
    let arms = DMatrix::from_fn(7, 3, |_, _| rng.random_range(-1.0..1.0));
    let theta = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
    let inst = Instance::new(
        arms.clone(),
        None,
        theta,
        DMatrix::identity(2, 2),
        NoiseKind::Gaussian,
        ThetaConstraint::Unbounded,
    )
    .unwrap();
    let mut est = Estimator::init(&inst, Mode::Structured { xi: 1.0 }, |_| Ok(DVector::zeros(2))).unwrap();
    let mut dense = DMatrix::identity(3, 3) * est.xi();
    for _ in 0..50 {
        let a = rng.random_range(0..7);
        let x = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        est.update(a, &x).unwrap();
        let row = arms.row(a).transpose();
        dense += &row * row.transpose();
        let inv = dense.clone().try_inverse().unwrap();
        assert!((est.v_inv() - inv).abs().max() <= 1e-9);
    }
}
