//! Pareto-order geometry over mean matrices whose rows are answers.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default cap on the number of convex pieces enumerated for `alt(S)`.
pub const DEFAULT_PIECE_BUDGET: u128 = 1_000_000;

/// Sorted set of answer indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ParetoSet {
    indices: Vec<usize>,
}

impl ParetoSet {
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self { indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    /// Membership mask over `n` answers.
    pub fn mask(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for &i in &self.indices {
            m[i] = true;
        }
        m
    }

    /// Indices in `0..n` outside the set.
    pub fn complement(&self, n: usize) -> Vec<usize> {
        (0..n).filter(|&i| !self.contains(i)).collect()
    }
}

impl std::fmt::Display for ParetoSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.indices.iter().map(|i| i.to_string()).collect();
        write!(f, "{{{}}}", parts.join(" "))
    }
}

/// Whether `v ≺ u`: `v ≤ u` coordinatewise with one strict coordinate.
pub fn dominates(u: &[f64], v: &[f64]) -> Result<bool> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    Ok(dominated_by(v, u))
}

// v ≺ u, lengths assumed equal
#[inline]
fn dominated_by(v: &[f64], u: &[f64]) -> bool {
    let mut strict = false;
    for (a, b) in v.iter().zip(u) {
        if a > b {
            return false;
        }
        if a < b {
            strict = true;
        }
    }
    strict
}

#[inline]
fn row_dominated(means: &DMatrix<f64>, z: usize, x: usize) -> bool {
    // μ_z ≺ μ_x
    let mut strict = false;
    for c in 0..means.ncols() {
        let (a, b) = (means[(z, c)], means[(x, c)]);
        if a > b {
            return false;
        }
        if a < b {
            strict = true;
        }
    }
    strict
}

/// Exact Pareto set of the rows of `means`.
pub fn pareto_set(means: &DMatrix<f64>) -> ParetoSet {
    if means.ncols() == 2 {
        pareto_set_2d(means)
    } else {
        pareto_set_scan(means)
    }
}

/// Pairwise O(n²d) scan.
pub fn pareto_set_scan(means: &DMatrix<f64>) -> ParetoSet {
    let n = means.nrows();
    let indices = (0..n)
        .filter(|&z| !(0..n).any(|x| x != z && row_dominated(means, z, x)))
        .collect();
    ParetoSet { indices }
}

/// Sort by the first coordinate, then sweep keeping the best second coordinate.
pub fn pareto_set_2d(means: &DMatrix<f64>) -> ParetoSet {
    assert_eq!(means.ncols(), 2);
    let n = means.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| means[(b, 0)].total_cmp(&means[(a, 0)]));
    let mut out = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut i = 0;
    while i < n {
        let x = means[(order[i], 0)];
        let mut j = i;
        let mut top = f64::NEG_INFINITY;
        while j < n && means[(order[j], 0)] == x {
            top = top.max(means[(order[j], 1)]);
            j += 1;
        }
        if top > best {
            out.extend(order[i..j].iter().copied().filter(|&k| means[(k, 1)] == top));
        }
        best = best.max(top);
        i = j;
    }
    ParetoSet::new(out)
}

/// Whether the Pareto set of `means` differs from `s`.
///
/// Evaluated from the halfspace structure of the alternative set: some member
/// is dominated by another member, or some non-member escapes domination by
/// every member.
pub fn in_alt(means: &DMatrix<f64>, s: &ParetoSet) -> bool {
    AltTest::new(s, means.nrows()).contains(means)
}

/// Precomputed member/non-member split for repeated [`in_alt`] queries.
#[derive(Debug, Clone)]
pub struct AltTest {
    members: Vec<usize>,
    others: Vec<usize>,
}

impl AltTest {
    pub fn new(s: &ParetoSet, n: usize) -> Self {
        Self {
            members: s.indices().to_vec(),
            others: s.complement(n),
        }
    }

    pub fn contains(&self, means: &DMatrix<f64>) -> bool {
        for &z in &self.members {
            for &x in &self.members {
                if z != x && row_dominated(means, z, x) {
                    return true;
                }
            }
        }
        self.others
            .iter()
            .any(|&z| !self.members.iter().any(|&x| row_dominated(means, z, x)))
    }
}

/// [`in_alt`] for a parameter `λ` (h×d) and answer features `Z` (|Z|×h).
pub fn in_alt_param(lambda: &DMatrix<f64>, answers: &DMatrix<f64>, s: &ParetoSet) -> bool {
    in_alt(&(answers * lambda), s)
}

/// One convex piece of `alt(S)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AltPiece {
    /// Member `z` dominated by member `x`: `λ_z(c) ≤ λ_x(c)` for every `c`.
    Demote { z: usize, x: usize },
    /// Non-member `z` beats each member `S[j]` on coordinate `coords[j]`.
    Promote { z: usize, coords: Vec<usize> },
}

/// Halfspace `μ_plus(coord) − μ_minus(coord) ≤ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PieceConstraint {
    pub plus: usize,
    pub minus: usize,
    pub coord: usize,
}

impl PieceConstraint {
    /// Signed slack `μ_plus(coord) − μ_minus(coord)`; the constraint holds when ≤ 0.
    pub fn value(&self, means: &DMatrix<f64>) -> f64 {
        means[(self.plus, self.coord)] - means[(self.minus, self.coord)]
    }
}

impl AltPiece {
    pub fn constraints(&self, s: &ParetoSet, d: usize) -> Vec<PieceConstraint> {
        match self {
            AltPiece::Demote { z, x } => (0..d)
                .map(|coord| PieceConstraint {
                    plus: *z,
                    minus: *x,
                    coord,
                })
                .collect(),
            AltPiece::Promote { z, coords } => s
                .indices()
                .iter()
                .zip(coords)
                .map(|(&x, &coord)| PieceConstraint {
                    plus: x,
                    minus: *z,
                    coord,
                })
                .collect(),
        }
    }

    /// Membership of the closed piece, with slack `tol`.
    pub fn contains(&self, means: &DMatrix<f64>, s: &ParetoSet, tol: f64) -> bool {
        self.constraints(s, means.ncols())
            .iter()
            .all(|c| c.value(means) <= tol)
    }
}

/// Number of pieces `p(p−1) + (n−p)·d^p`, or `None` on overflow.
pub fn piece_count(p: usize, n: usize, d: usize) -> Option<u128> {
    let demote = (p as u128).checked_mul(p.saturating_sub(1) as u128)?;
    let pow = (d as u128).checked_pow(u32::try_from(p).ok()?)?;
    let promote = ((n - p) as u128).checked_mul(pow)?;
    demote.checked_add(promote)
}

/// All convex pieces of `alt(S)` over `n` answers in dimension `d`.
pub fn alt_pieces(s: &ParetoSet, n: usize, d: usize, budget: u128) -> Result<Vec<AltPiece>> {
    let p = s.len();
    if p == 0 {
        return Err(Error::InvalidArgument("empty Pareto set".into()));
    }
    let count = piece_count(p, n, d).unwrap_or(u128::MAX);
    if count > budget {
        return Err(Error::PieceBudget { count, budget });
    }
    let mut pieces = Vec::with_capacity(count as usize);
    for &z in s.indices() {
        for &x in s.indices() {
            if z != x {
                pieces.push(AltPiece::Demote { z, x });
            }
        }
    }
    for z in s.complement(n) {
        let mut coords = vec![0usize; p];
        loop {
            pieces.push(AltPiece::Promote {
                z,
                coords: coords.clone(),
            });
            // odometer over {0..d}^p
            let mut k = 0;
            while k < p {
                coords[k] += 1;
                if coords[k] < d {
                    break;
                }
                coords[k] = 0;
                k += 1;
            }
            if k == p {
                break;
            }
        }
    }
    Ok(pieces)
}

/// Gap quantities of a mean matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GapSummary {
    pub pareto: ParetoSet,
    /// `ℳ(a, a′) = ‖(μ_a − μ_a′)₊‖₂`.
    pub big_m: DMatrix<f64>,
    /// `m(a, a′) = min_c (μ_a(c) − μ_a′(c))`.
    pub small_m: DMatrix<f64>,
    pub delta1: f64,
    pub delta2: f64,
    pub delta_min: f64,
    pub per_arm: Vec<f64>,
    /// `H = Σ_i Δ_i⁻²`.
    pub complexity: f64,
}

impl GapSummary {
    pub fn is_degenerate(&self) -> bool {
        !(self.delta_min > 0.0)
    }
}

pub fn gaps(means: &DMatrix<f64>) -> GapSummary {
    let n = means.nrows();
    let d = means.ncols();
    let pareto = pareto_set(means);
    let mut big_m = DMatrix::zeros(n, n);
    let mut small_m = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            let mut sq = 0.0;
            let mut mn = f64::INFINITY;
            for c in 0..d {
                let diff = means[(a, c)] - means[(b, c)];
                sq += diff.max(0.0).powi(2);
                mn = mn.min(diff);
            }
            big_m[(a, b)] = sq.sqrt();
            small_m[(a, b)] = mn;
        }
    }
    let mask = pareto.mask(n);
    let mut per_arm = vec![0.0; n];
    for a in 0..n {
        per_arm[a] = if mask[a] {
            (0..n).filter(|&b| b != a).map(|b| big_m[(a, b)]).fold(f64::INFINITY, f64::min)
        } else {
            pareto
                .indices()
                .iter()
                .map(|&b| small_m[(b, a)])
                .fold(f64::NEG_INFINITY, f64::max)
        };
    }
    let delta1 = (0..n).filter(|&a| mask[a]).map(|a| per_arm[a]).fold(f64::INFINITY, f64::min);
    let delta2 = (0..n).filter(|&a| !mask[a]).map(|a| per_arm[a]).fold(f64::INFINITY, f64::min);
    let delta_min = delta1.min(delta2);
    let complexity = per_arm.iter().map(|g| g.powi(-2)).sum();
    GapSummary {
        pareto,
        big_m,
        small_m,
        delta1,
        delta2,
        delta_min,
        per_arm,
        complexity,
    }
}
