use nalgebra::{DMatrix, DVector};
use rand::Rng;
use psi_core::algorithms::{run, run_profile, Algo, RunConfig};
use psi_core::calibration::CalibrationKind;
use psi_core::estimator::{Estimator, Mode};
use psi_core::instance::NoiseKind;
use psi_core::pareto::pareto_set_scan;
use psi_core::rng::{seeded, trial_seed};
use psi_core::Instance;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn records_are_consistent_for_every_algorithm() {
    let inst = Instance::rotation(5, 1.0).unwrap();
    let truth = pareto_set_scan(&inst.arm_means());
    let w_star = psi_core::oracle::characteristic_time(&inst, 2000, 1e-6).unwrap().w_star;
    let cfg = RunConfig::default();
    for algo in [Algo::Psips, Algo::Uniform, Algo::Oracle, Algo::ApeStyle] {
        for seed in 0..5 {
            let rec = run(&inst, algo, &cfg, Some(&w_star), seed).unwrap();
            assert!(rec.stopped);
            assert!(rec.tau >= inst.n_arms() as u64);
            assert_eq!(rec.correct, rec.recommended == truth);
            let again = run(&inst, algo, &cfg, Some(&w_star), seed).unwrap();
            assert_eq!((rec.tau, &rec.recommended, rec.avg_m_t, rec.avg_m_t_delta), (again.tau, &again.recommended, again.avg_m_t, again.avg_m_t_delta));
        }
    }
}

#[test]
fn stopping_time_grows_as_delta_shrinks() {
    let inst = Instance::rotation(5, 1.0).unwrap();
    let taus = |delta: f64| -> Vec<f64> {
        let cfg = RunConfig::default().with_delta(delta);
        (0..100)
            .map(|i| run(&inst, Algo::Psips, &cfg, None, trial_seed(7, i)).unwrap().tau as f64)
            .collect()
    };
    let loose = mean(&taus(0.01));
    let tight = mean(&taus(0.001));
    assert!(tight > loose, "{tight} <= {loose}");
}

#[test]
fn lemma2_calibration_runs() {
    let inst = Instance::rotation(5, 1.0).unwrap();
    let cfg = RunConfig::default().with_calibration(CalibrationKind::Lemma2);
    let rec = run(&inst, Algo::Psips, &cfg, None, 3).unwrap();
    assert!(rec.stopped && rec.correct);
}

#[test]
fn rejections_grow_as_posterior_concentrates() {
    let inst = Instance::rotation(5, 1.0).unwrap();
    let out = run_profile(&inst, &RunConfig::default(), 5000, 1, false).unwrap();
    assert_eq!(out.rows.len(), 5000);
    let decile = |rows: &[psi_core::algorithms::ProfileRow]| rows.iter().map(|r| r.m_t_delta as f64).sum::<f64>() / rows.len() as f64;
    let first = decile(&out.rows[..500]);
    let last = decile(&out.rows[4500..]);
    assert!(last > first, "{last} <= {first}");
    // the empirical set settles on the truth
    assert!(out.rows[4000..].iter().all(|r| !r.error));
}

#[test]
fn structured_instance_identifies_pareto_set() {
    let mut rng = seeded(12);
    let arms = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
    let theta = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
    let inst = Instance::new(
        arms,
        None,
        theta,
        DMatrix::identity(2, 2) * 0.25,
        NoiseKind::Gaussian,
        psi_core::instance::ThetaConstraint::Unbounded,
    )
    .unwrap();
    let rec = run(&inst, Algo::Psips, &RunConfig::default(), None, 4).unwrap();
    assert!(rec.stopped);
    assert_eq!(rec.correct, rec.recommended == pareto_set_scan(&inst.answer_means()));
}

#[test]
fn posterior_marginal_variance() {
    let mut rng = seeded(3);
    let arms = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
    let theta = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
    let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.8]);
    let inst = Instance::new(arms.clone(), None, theta, sigma.clone(), NoiseKind::Gaussian, psi_core::instance::ThetaConstraint::Unbounded).unwrap();
    let mut est = Estimator::init(&inst, Mode::Structured { xi: 1.0 }, |_| Ok(DVector::zeros(2))).unwrap();
    for i in 0..40 {
        let x = inst.draw_observation(i % 5, &mut rng).unwrap();
        est.update(i % 5, &x).unwrap();
    }
    let z = arms.row(1).transpose();
    let scale = 1.7;
    let want = scale * sigma[(0, 0)] * (z.transpose() * est.v_inv() * &z)[(0, 0)];
    let n = 100_000;
    let mut vals = Vec::with_capacity(n);
    for _ in 0..n {
        let draw = est.posterior_draw(scale, &mut rng).unwrap();
        vals.push((z.transpose() * draw.column(0))[(0, 0)]);
    }
    let m = mean(&vals);
    let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((var / want - 1.0).abs() < 0.05, "{var} vs {want}");
}

#[test]
fn gaussian_standardized_residuals() {
    let sigma = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.2, 0.5, 2.0, -0.3, 0.2, -0.3, 0.7]);
    let means = DMatrix::from_row_slice(2, 3, &[0.1, -0.4, 1.0, 0.0, 0.0, 0.0]);
    let inst = Instance::unstructured(means.clone(), sigma.clone(), NoiseKind::Gaussian).unwrap();
    let l = sigma.cholesky().unwrap().unpack();
    let linv = l.try_inverse().unwrap();
    let mut rng = seeded(8);
    let n = 100_000;
    let mut sum = DVector::<f64>::zeros(3);
    let mut outer = DMatrix::<f64>::zeros(3, 3);
    for _ in 0..n {
        let x = inst.draw_observation(0, &mut rng).unwrap();
        let r = &linv * (x - means.row(0).transpose());
        sum += &r;
        outer += &r * r.transpose();
    }
    let nf = n as f64;
    let mean = sum / nf;
    let cov = outer / nf;
    // mean entries have se 1/√n; second moments se ≈ √2/√n on the diagonal, 1/√n off it
    for i in 0..3 {
        assert!(mean[i].abs() < 4.0 / nf.sqrt());
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            let se = if i == j { 2f64.sqrt() } else { 1.0 } / nf.sqrt();
            assert!((cov[(i, j)] - target).abs() < 4.0 * se, "({i},{j}) {}", cov[(i, j)]);
        }
    }
}

#[test]
fn generator_is_seed_deterministic() {
    use psi_core::instance::GenKind;
    for kind in [GenKind::GaussianCube, GenKind::BernoulliBox] {
        let a = Instance::gen_random(kind, 6, 2, &mut seeded(99), None).unwrap();
        let b = Instance::gen_random(kind, 6, 2, &mut seeded(99), None).unwrap();
        assert_eq!(a.to_json_string().unwrap(), b.to_json_string().unwrap());
        assert_eq!(a.arm_means(), b.arm_means());
    }
}
