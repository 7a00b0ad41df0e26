//! Bandit environments.
//!
//! An [`Instance`] stores arm features `A` (K×h), answer features `Z` (|Z|×h),
//! the regression matrix `θ` (h×d) and the objective covariance `Σ`. The mean
//! of answer `z` is `θᵀz`. In the unstructured setting `A = Z = I_K`, so the
//! rows of `θ` are the arm means.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::pareto::{self, GapSummary, ParetoSet};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    /// Independent Bernoulli coordinates with the instance means.
    Bernoulli,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ThetaConstraint {
    Unbounded,
    /// `max_c ‖θ e_c‖₂ ≤ radius`.
    Ball { radius: f64 },
}

#[derive(Debug, Clone)]
pub struct Instance {
    name: String,
    arms: DMatrix<f64>,
    answers: DMatrix<f64>,
    theta: DMatrix<f64>,
    sigma: DMatrix<f64>,
    sigma_chol: DMatrix<f64>,
    sigma_inv: DMatrix<f64>,
    noise: NoiseKind,
    constraint: ThetaConstraint,
    unstructured: bool,
}

impl Instance {
    /// General transductive instance. `answers = None` uses the arms as answers.
    pub fn new(
        arms: DMatrix<f64>,
        answers: Option<DMatrix<f64>>,
        theta: DMatrix<f64>,
        sigma: DMatrix<f64>,
        noise: NoiseKind,
        constraint: ThetaConstraint,
    ) -> Result<Self> {
        let h = arms.ncols();
        if arms.nrows() == 0 || h == 0 {
            return Err(Error::InvalidInstance("no arms".into()));
        }
        let answers = answers.unwrap_or_else(|| arms.clone());
        if answers.ncols() != h {
            return Err(Error::DimensionMismatch {
                expected: h,
                got: answers.ncols(),
            });
        }
        if answers.nrows() == 0 {
            return Err(Error::InvalidInstance("no answers".into()));
        }
        if theta.nrows() != h {
            return Err(Error::DimensionMismatch {
                expected: h,
                got: theta.nrows(),
            });
        }
        let d = theta.ncols();
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: sigma.nrows(),
            });
        }
        let all_finite = arms.iter().chain(answers.iter()).chain(theta.iter()).chain(sigma.iter());
        if all_finite.clone().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInstance("non-finite entry".into()));
        }
        let symmetric = (0..d).all(|i| (0..i).all(|j| sigma[(i, j)] == sigma[(j, i)]));
        if !symmetric {
            return Err(Error::InvalidInstance("covariance is not symmetric".into()));
        }
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidInstance("covariance is not positive definite".into()))?;
        let sigma_inv = chol.inverse();
        let sigma_chol = chol.unpack();

        let k = arms.nrows();
        let unstructured = h == k
            && arms == DMatrix::identity(k, k)
            && answers == arms;

        if noise == NoiseKind::Bernoulli {
            let means = &arms * &theta;
            if means.iter().any(|&m| !(0.0..=1.0).contains(&m)) {
                return Err(Error::InvalidInstance(
                    "bernoulli noise needs every arm mean in [0, 1]".into(),
                ));
            }
        }
        if let ThetaConstraint::Ball { radius } = constraint {
            if !(radius > 0.0) {
                return Err(Error::InvalidInstance(format!("bad ball radius {radius}")));
            }
            let norm = max_column_norm(&theta);
            if norm > radius {
                return Err(Error::InvalidInstance(format!(
                    "parameter column norm {norm} exceeds ball radius {radius}"
                )));
            }
        }

        Ok(Self {
            name: String::from("custom"),
            arms,
            answers,
            theta,
            sigma,
            sigma_chol,
            sigma_inv,
            noise,
            constraint,
            unstructured,
        })
    }

    /// Unstructured instance whose arm means are the rows of `means`.
    pub fn unstructured(means: DMatrix<f64>, sigma: DMatrix<f64>, noise: NoiseKind) -> Result<Self> {
        let k = means.nrows();
        Self::new(
            DMatrix::identity(k, k),
            None,
            means,
            sigma,
            noise,
            ThetaConstraint::Unbounded,
        )
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Same environment with another covariance.
    pub fn with_sigma(&self, sigma: DMatrix<f64>) -> Result<Self> {
        let name = self.name.clone();
        Ok(Self::new(
            self.arms.clone(),
            Some(self.answers.clone()),
            self.theta.clone(),
            sigma,
            self.noise,
            self.constraint,
        )?
        .with_name(name))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_arms(&self) -> usize {
        self.arms.nrows()
    }

    pub fn n_answers(&self) -> usize {
        self.answers.nrows()
    }

    pub fn dim(&self) -> usize {
        self.theta.ncols()
    }

    pub fn n_features(&self) -> usize {
        self.arms.ncols()
    }

    pub fn arms(&self) -> &DMatrix<f64> {
        &self.arms
    }

    pub fn answers(&self) -> &DMatrix<f64> {
        &self.answers
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Lower Cholesky factor of Σ.
    pub fn sigma_chol(&self) -> &DMatrix<f64> {
        &self.sigma_chol
    }

    pub fn sigma_inv(&self) -> &DMatrix<f64> {
        &self.sigma_inv
    }

    pub fn noise(&self) -> NoiseKind {
        self.noise
    }

    pub fn theta_constraint(&self) -> ThetaConstraint {
        self.constraint
    }

    pub fn is_unstructured(&self) -> bool {
        self.unstructured
    }

    /// Largest Euclidean norm of an arm feature vector.
    pub fn max_arm_norm(&self) -> f64 {
        self.arms.row_iter().map(|r| r.norm()).fold(0.0, f64::max)
    }

    /// `μ_z = θᵀ z` for answer `answer_index`.
    pub fn mean_of(&self, answer_index: usize) -> Result<DVector<f64>> {
        if answer_index >= self.n_answers() {
            return Err(Error::IndexOutOfRange {
                index: answer_index,
                len: self.n_answers(),
            });
        }
        Ok(self.theta.transpose() * self.answers.row(answer_index).transpose())
    }

    /// Answer means stacked as rows (|Z|×d).
    pub fn answer_means(&self) -> DMatrix<f64> {
        &self.answers * &self.theta
    }

    /// Arm means stacked as rows (K×d).
    pub fn arm_means(&self) -> DMatrix<f64> {
        &self.arms * &self.theta
    }

    pub fn pareto_set(&self) -> ParetoSet {
        pareto::pareto_set(&self.answer_means())
    }

    pub fn gaps(&self) -> GapSummary {
        pareto::gaps(&self.answer_means())
    }

    /// One observation from arm `arm_index`.
    pub fn draw_observation<R: Rng + ?Sized>(&self, arm_index: usize, rng: &mut R) -> Result<DVector<f64>> {
        if arm_index >= self.n_arms() {
            return Err(Error::IndexOutOfRange {
                index: arm_index,
                len: self.n_arms(),
            });
        }
        let mean = self.theta.transpose() * self.arms.row(arm_index).transpose();
        let d = self.dim();
        Ok(match self.noise {
            NoiseKind::Gaussian => {
                let g = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                mean + &self.sigma_chol * g
            }
            NoiseKind::Bernoulli => DVector::from_fn(d, |c, _| {
                if rng.random::<f64>() < mean[c] {
                    1.0
                } else {
                    0.0
                }
            }),
        })
    }

    /// Five-or-more arm instance on a circle: `μ₁ = (1, 1)`, each next arm
    /// rotated by π/5, `Σ = variance · I₂`.
    pub fn rotation(k: usize, variance: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument("rotation needs K >= 2".into()));
        }
        let (s, c) = (PI / 5.0).sin_cos();
        let mut means = DMatrix::zeros(k, 2);
        let (mut x, mut y) = (1.0, 1.0);
        for i in 0..k {
            means[(i, 0)] = x;
            means[(i, 1)] = y;
            (x, y) = (c * x - s * y, s * x + c * y);
        }
        Ok(
            Self::unstructured(means, DMatrix::identity(2, 2) * variance, NoiseKind::Gaussian)?
                .with_name("rotation"),
        )
    }

    /// Two-answer best-arm instance with means `0` and `gap` and noise variance `variance`.
    pub fn two_arm(gap: f64, variance: f64) -> Result<Self> {
        let means = DMatrix::from_column_slice(2, 1, &[0.0, gap]);
        Ok(Self::unstructured(means, DMatrix::from_element(1, 1, variance), NoiseKind::Gaussian)?
            .with_name("bai2"))
    }

    /// Unit-variance 2×2 covariance with correlation `rho`, scaled by `variance`.
    pub fn correlated_sigma(rho: f64, variance: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[variance, rho * variance, rho * variance, variance])
    }

    pub fn gen_random<R: Rng + ?Sized>(
        kind: GenKind,
        k: usize,
        d: usize,
        rng: &mut R,
        complexity_cap: Option<f64>,
    ) -> Result<Self> {
        if k < 2 || d == 0 {
            return Err(Error::InvalidArgument(format!("need K >= 2 and d >= 1, got K={k}, d={d}")));
        }
        if kind == GenKind::Rotation {
            let inst = Self::rotation(k, 0.5)?;
            if let Some(cap) = complexity_cap {
                let h = inst.gaps().complexity;
                if !(h <= cap) {
                    return Err(Error::CapUnattainable { cap, tries: 1 });
                }
            }
            return Ok(inst);
        }
        let tries = if complexity_cap.is_some() { MAX_CAP_TRIES } else { 1 };
        for _ in 0..tries {
            let (lo, hi, var, noise, name) = match kind {
                GenKind::GaussianCube => (-1.0, 1.0, 0.5, NoiseKind::Gaussian, "random-gaussian"),
                GenKind::BernoulliBox => (0.2, 0.9, 0.25, NoiseKind::Bernoulli, "random-bernoulli"),
                GenKind::Rotation => unreachable!(),
            };
            let means = DMatrix::from_fn(k, d, |_, _| rng.random_range(lo..hi));
            let inst = Self::unstructured(means, DMatrix::identity(d, d) * var, noise)?.with_name(name);
            match complexity_cap {
                Some(cap) if !(inst.gaps().complexity <= cap) => continue,
                _ => return Ok(inst),
            }
        }
        Err(Error::CapUnattainable {
            cap: complexity_cap.unwrap_or(f64::INFINITY),
            tries,
        })
    }

    /// The booster-vaccine dataset: 20 strategies, 3 log immune responses.
    pub fn covboost() -> Self {
        let means = DMatrix::from_row_slice(20, 3, &COVBOOST_MEANS);
        let sigma = DMatrix::from_diagonal(&DVector::from_column_slice(&COVBOOST_VARIANCES));
        Self::unstructured(means, sigma, NoiseKind::Gaussian)
            .expect("embedded table is valid")
            .with_name("covboost")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: InstanceFile = serde_json::from_str(s)?;
        file.into_instance()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        Ok(Self::from_json_str(&text)?.with_name(name))
    }

    pub fn to_file(&self) -> InstanceFile {
        let rows = |m: &DMatrix<f64>| m.row_iter().map(|r| r.iter().copied().collect()).collect();
        InstanceFile {
            k: self.n_arms(),
            d: self.dim(),
            h: self.n_features(),
            arms: rows(&self.arms),
            answers: if self.answers == self.arms {
                None
            } else {
                Some(rows(&self.answers))
            },
            theta: rows(&self.theta),
            sigma: rows(&self.sigma),
            noise: self.noise,
            theta_ball: match self.constraint {
                ThetaConstraint::Unbounded => None,
                ThetaConstraint::Ball { radius } => Some(radius),
            },
        }
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }
}

const MAX_CAP_TRIES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenKind {
    GaussianCube,
    BernoulliBox,
    Rotation,
}

impl std::str::FromStr for GenKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" | "gaussian-cube" | "gaussian_cube" => Ok(Self::GaussianCube),
            "bernoulli" | "bernoulli-box" | "bernoulli_box" => Ok(Self::BernoulliBox),
            "rotation" => Ok(Self::Rotation),
            other => Err(Error::InvalidArgument(format!("unknown generator {other}"))),
        }
    }
}

/// On-disk instance document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFile {
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
    pub h: usize,
    #[serde(rename = "A")]
    pub arms: Vec<Vec<f64>>,
    #[serde(rename = "Z", default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<Vec<Vec<f64>>>,
    pub theta: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub noise: NoiseKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_ball: Option<f64>,
}

impl InstanceFile {
    pub fn into_instance(self) -> Result<Instance> {
        let arms = matrix(&self.arms, self.k, self.h, "A")?;
        let answers = match &self.answers {
            Some(z) => Some(matrix(z, z.len(), self.h, "Z")?),
            None => None,
        };
        let theta = matrix(&self.theta, self.h, self.d, "theta")?;
        let sigma = matrix(&self.sigma, self.d, self.d, "sigma")?;
        let constraint = match self.theta_ball {
            Some(radius) => ThetaConstraint::Ball { radius },
            None => ThetaConstraint::Unbounded,
        };
        Instance::new(arms, answers, theta, sigma, self.noise, constraint)
    }
}

fn matrix(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows {
        return Err(Error::InvalidInstance(format!(
            "{what}: expected {nrows} rows, got {}",
            rows.len()
        )));
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != ncols) {
        return Err(Error::InvalidInstance(format!(
            "{what}: expected {ncols} columns, got {}",
            bad.len()
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn max_column_norm(theta: &DMatrix<f64>) -> f64 {
    theta.column_iter().map(|c| c.norm()).fold(0.0, f64::max)
}

pub const COVBOOST_VARIANCES: [f64; 3] = [0.70, 0.83, 1.54];

pub const COVBOOST_ARMS: [&str; 20] = [
    "BNT/BNT ChAd",
    "BNT/BNT NVX",
    "BNT/BNT NVX Half",
    "BNT/BNT BNT",
    "BNT/BNT BNT Half",
    "BNT/BNT VLA",
    "BNT/BNT VLA Half",
    "BNT/BNT Ad26",
    "BNT/BNT m1273",
    "BNT/BNT CVn",
    "ChAd/ChAd ChAd",
    "ChAd/ChAd NVX",
    "ChAd/ChAd NVX Half",
    "ChAd/ChAd BNT",
    "ChAd/ChAd BNT Half",
    "ChAd/ChAd VLA",
    "ChAd/ChAd VLA Half",
    "ChAd/ChAd Ad26",
    "ChAd/ChAd m1273",
    "ChAd/ChAd CVn",
];

#[rustfmt::skip]
pub const COVBOOST_MEANS: [f64; 60] = [
    9.50, 6.86, 4.56,
    9.29, 6.64, 4.04,
    9.05, 6.41, 3.56,
    10.21, 7.49, 4.43,
    10.05, 7.20, 4.36,
    8.34, 5.67, 3.51,
    8.22, 5.46, 3.64,
    9.75, 7.27, 4.71,
    10.43, 7.61, 4.72,
    8.94, 6.19, 3.84,
    7.81, 5.26, 3.97,
    8.85, 6.59, 4.73,
    8.44, 6.15, 4.59,
    9.93, 7.39, 4.75,
    8.71, 7.20, 4.91,
    7.51, 5.31, 3.96,
    7.27, 4.99, 4.02,
    8.62, 6.33, 4.66,
    10.35, 7.77, 5.00,
    8.29, 5.92, 3.87,
];

#[rustfmt::skip]
pub const NOC_THETA: [f64; 8] = [
    -3.08665453, -3.35487744,
    -3.66027623, 0.19333635,
    -2.68963781, -1.39779755,
    -7.90670356, -4.44360318,
];

/// Radius of the ball constraint used for the hardware-design instance.
pub const NOC_BALL_RADIUS: f64 = 10.0;

/// The hardware-design regression: the fitted θ* is embedded, the 259 normalized
/// design features are external data.
#[derive(Debug, Clone)]
pub struct NocData {
    pub theta: DMatrix<f64>,
    features: Option<DMatrix<f64>>,
}

impl NocData {
    pub fn features(&self) -> Result<&DMatrix<f64>> {
        self.features
            .as_ref()
            .ok_or_else(|| Error::MissingData("design feature file not supplied".into()))
    }

    pub fn has_features(&self) -> bool {
        self.features.is_some()
    }

    /// Linear instance with `Σ = I₂` and the θ ball of radius [`NOC_BALL_RADIUS`].
    pub fn instance(&self) -> Result<Instance> {
        let features = self.features()?.clone();
        Ok(Instance::new(
            features,
            None,
            self.theta.clone(),
            DMatrix::identity(2, 2),
            NoiseKind::Gaussian,
            ThetaConstraint::Ball {
                radius: NOC_BALL_RADIUS,
            },
        )?
        .with_name("noc"))
    }
}

/// Hardware-design data; the feature file is a header-less CSV with 4 numeric columns.
pub fn load_noc(features_path: Option<&Path>) -> Result<NocData> {
    let theta = DMatrix::from_row_slice(4, 2, &NOC_THETA);
    let features = match features_path {
        None => None,
        Some(path) => Some(parse_feature_csv(&std::fs::read_to_string(path)?)?),
    };
    Ok(NocData { theta, features })
}

fn parse_feature_csv(text: &str) -> Result<DMatrix<f64>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidInstance(format!("feature line {}: {e}", i + 1)))?;
        if row.len() != 4 {
            return Err(Error::InvalidInstance(format!(
                "feature line {}: expected 4 columns, got {}",
                i + 1,
                row.len()
            )));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidInstance("empty feature file".into()));
    }
    matrix(&rows, rows.len(), 4, "features")
}
