//! Fixed-point solver for the biased contribution index.
//!
//! Each peer's index is
//!
//! > x_i = α · (s·x)_i / ((s·x)_i + (sᵀ·x)_i) + (1 − α)
//!
//! where `(s·x)_i` is what peer `i` uploaded weighted by its counterparts'
//! indices and `(sᵀ·x)_i` what it downloaded, weighted the same way. A peer
//! with no transactions at all keeps the neutral value `1 − α/2`.
//!
//! The fixed point is found by synchronous (Jacobi) iteration started from the
//! neutral vector. Every iterate lies in `[1 − α, 1]^N`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{PeerId, ShareMatrix};
use crate::numfmt::{self, round4};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("alpha must lie in the open interval (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("tolerance must be a positive finite number, got {0}")]
    InvalidTolerance(f64),
    #[error("max_iterations must be at least 1")]
    InvalidMaxIterations,
    #[error("vector has {found} entries but the ledger has {expected} peers")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("entry {index} of the input vector is {value}; all entries must be positive")]
    NonPositiveInput { index: usize, value: f64 },
}

pub(crate) fn check_alpha(alpha: f64) -> Result<f64, SolverError> {
    if alpha.is_finite() && alpha > 0.0 && alpha < 1.0 {
        Ok(alpha)
    } else {
        Err(SolverError::InvalidAlpha(alpha))
    }
}

/// Lowest index any peer can have: `1 − α` (downloads only).
pub fn min_bci(alpha: f64) -> Result<f64, SolverError> {
    Ok(1.0 - check_alpha(alpha)?)
}

/// Highest index any peer can have (uploads only).
pub fn max_bci() -> f64 {
    1.0
}

/// Index of a peer with no transactions, and the starting value of every peer.
pub fn neutral_bci(alpha: f64) -> Result<f64, SolverError> {
    Ok(1.0 - check_alpha(alpha)? / 2.0)
}

/// When to stop iterating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stopping {
    /// Stop once every entry equals the previous iterate after rounding to
    /// four decimals (half away from zero).
    FourDecimalEquality,
    /// Stop once the ∞-norm of the step is below the tolerance.
    InfNormTol(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BciParams {
    pub alpha: f64,
    pub stopping: Stopping,
    pub max_iterations: usize,
}

impl Default for BciParams {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            stopping: Stopping::FourDecimalEquality,
            max_iterations: 10_000,
        }
    }
}

impl BciParams {
    pub fn new(alpha: f64) -> Result<Self, SolverError> {
        let params = Self {
            alpha,
            ..Self::default()
        };
        params.validate()?;
        Ok(params)
    }

    pub fn with_stopping(mut self, stopping: Stopping) -> Self {
        self.stopping = stopping;
        self
    }

    pub fn with_max_iterations(mut self, max_iterations: usize) -> Self {
        self.max_iterations = max_iterations;
        self
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        check_alpha(self.alpha)?;
        if let Stopping::InfNormTol(eps) = self.stopping {
            if !(eps.is_finite() && eps > 0.0) {
                return Err(SolverError::InvalidTolerance(eps));
            }
        }
        if self.max_iterations == 0 {
            return Err(SolverError::InvalidMaxIterations);
        }
        Ok(())
    }
}

/// Vector of per-peer indices.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(transparent)]
pub struct BciVector(Vec<f64>);

impl Serialize for BciVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        numfmt::ser_vec(&self.0, s)
    }
}

impl BciVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn uniform(n: usize, value: f64) -> Self {
        Self(vec![value; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, peer: PeerId) -> f64 {
        self.0[peer.0]
    }

    /// ∞-norm of `self − other`.
    pub fn max_abs_diff(&self, other: &BciVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Largest minus smallest entry.
    pub fn dispersion(&self) -> f64 {
        let max = self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = self.0.iter().copied().fold(f64::INFINITY, f64::min);
        if self.0.is_empty() {
            0.0
        } else {
            max - min
        }
    }

    fn equal_at_four_decimals(&self, other: &BciVector) -> bool {
        self.0.iter().zip(&other.0).all(|(a, b)| round4(*a) == round4(*b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SolveWarning {
    /// The transaction graph is not strongly connected; convergence is not guaranteed.
    ReducibleMatrix,
    /// The stopping rule never fired.
    HitIterationCap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub alpha: f64,
    pub iterations: usize,
    pub x: BciVector,
    pub history: Vec<BciVector>,
    #[serde(serialize_with = "numfmt::ser_vec")]
    pub residuals: Vec<f64>,
    pub warnings: BTreeSet<SolveWarning>,
}

impl SolveResult {
    pub fn converged(&self) -> bool {
        !self.warnings.contains(&SolveWarning::HitIterationCap)
    }

    pub fn final_residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(0.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("solve result serializes")
    }
}

/// Sum with Neumaier compensation, in slice order.
pub(crate) fn compensated_sum(terms: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0f64;
    for t in terms {
        let s = sum + t;
        if sum.abs() >= t.abs() {
            carry += (sum - s) + t;
        } else {
            carry += (t - s) + sum;
        }
        sum = s;
    }
    sum + carry
}

/// Row-wise view of a ledger: outgoing (uploads) and incoming (downloads) edges.
#[derive(Debug, Clone)]
pub(crate) struct Adjacency {
    pub(crate) uploads: Vec<Vec<(usize, f64)>>,
    pub(crate) downloads: Vec<Vec<(usize, f64)>>,
}

impl Adjacency {
    pub(crate) fn new(ledger: &ShareMatrix) -> Self {
        let n = ledger.n();
        let mut uploads = vec![Vec::new(); n];
        let mut downloads = vec![Vec::new(); n];
        for (from, to, amount) in ledger.entries() {
            uploads[from.0].push((to.0, amount));
            downloads[to.0].push((from.0, amount));
        }
        Self { uploads, downloads }
    }

    pub(crate) fn n(&self) -> usize {
        self.uploads.len()
    }

    /// One peer's update given a lookup of its counterparts' current values.
    pub(crate) fn update_one(&self, i: usize, alpha: f64, value_of: impl Fn(usize) -> f64) -> f64 {
        let up = compensated_sum(self.uploads[i].iter().map(|&(j, a)| a * value_of(j)));
        let down = compensated_sum(self.downloads[i].iter().map(|&(j, a)| a * value_of(j)));
        let denom = up + down;
        if denom == 0.0 {
            1.0 - alpha / 2.0
        } else {
            // Same as α·up/denom + (1 − α), arranged so a zero upload gives
            // exactly 1 − α and a zero download gives exactly 1.
            1.0 - alpha * (down / denom)
        }
    }

    pub(crate) fn step(&self, x: &[f64], alpha: f64) -> Vec<f64> {
        (0..self.n())
            .map(|i| self.update_one(i, alpha, |j| x[j]))
            .collect()
    }
}

/// The starting vector: every peer at `1 − α/2`.
pub fn initial_vector(n: usize, alpha: f64) -> Result<BciVector, SolverError> {
    Ok(BciVector::uniform(n, neutral_bci(alpha)?))
}

fn check_input(ledger: &ShareMatrix, x: &BciVector) -> Result<(), SolverError> {
    if x.len() != ledger.n() {
        return Err(SolverError::DimensionMismatch {
            expected: ledger.n(),
            found: x.len(),
        });
    }
    if let Some((index, &value)) =
        x.0.iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
    {
        return Err(SolverError::NonPositiveInput { index, value });
    }
    Ok(())
}

/// One application of the update map to `x`.
pub fn phi_step(ledger: &ShareMatrix, x: &BciVector, alpha: f64) -> Result<BciVector, SolverError> {
    check_alpha(alpha)?;
    check_input(ledger, x)?;
    Ok(BciVector(Adjacency::new(ledger).step(&x.0, alpha)))
}

/// `‖x − φ(x)‖∞`, how far `x` is from being a fixed point.
pub fn fixed_point_residual(ledger: &ShareMatrix, x: &BciVector, alpha: f64) -> Result<f64, SolverError> {
    Ok(phi_step(ledger, x, alpha)?.max_abs_diff(x))
}

/// Iterates from the neutral vector until the stopping rule fires.
pub fn solve(ledger: &ShareMatrix, params: &BciParams) -> Result<SolveResult, SolverError> {
    params.validate()?;
    let alpha = params.alpha;
    let adjacency = Adjacency::new(ledger);
    let mut warnings = BTreeSet::new();
    if !ledger.is_irreducible() {
        warnings.insert(SolveWarning::ReducibleMatrix);
    }

    let mut x = initial_vector(ledger.n(), alpha)?;
    let mut history = vec![x.clone()];
    let mut residuals = Vec::new();
    let mut iterations = params.max_iterations;
    let mut stopped = false;

    for k in 1..=params.max_iterations {
        let next = BciVector(adjacency.step(&x.0, alpha));
        let residual = next.max_abs_diff(&x);
        let stop = match params.stopping {
            Stopping::FourDecimalEquality => next.equal_at_four_decimals(&x),
            Stopping::InfNormTol(eps) => residual < eps,
        };
        history.push(next.clone());
        residuals.push(residual);
        x = next;
        if stop {
            iterations = k;
            stopped = true;
            break;
        }
    }
    if !stopped {
        warnings.insert(SolveWarning::HitIterationCap);
    }

    Ok(SolveResult {
        alpha,
        iterations,
        x,
        history,
        residuals,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    #[serde(serialize_with = "numfmt::ser_f64")]
    pub alpha: f64,
    pub iterations: usize,
    pub x: BciVector,
}

/// One solve per α on the same ledger, in input order.
pub fn sweep_alpha(
    ledger: &ShareMatrix,
    alphas: &[f64],
    stopping: Stopping,
    max_iterations: usize,
) -> Result<Vec<SweepPoint>, SolverError> {
    alphas
        .iter()
        .map(|&alpha| {
            let params = BciParams {
                alpha,
                stopping,
                max_iterations,
            };
            let result = solve(ledger, &params)?;
            Ok(SweepPoint {
                alpha,
                iterations: result.iterations,
                x: result.x,
            })
        })
        .collect()
}

/// Outcome of checking the uniform-solution / balanced-ledger correspondence.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum UniformCheck {
    /// Solution is `(1 − α/2)·e` and every peer uploads what it downloads.
    UniformAndBalanced,
    /// Solution is uniform but some peer is out of balance.
    UniformOnly { peer: PeerId, violation: f64 },
    /// Solution is not uniform.
    NotUniform { max_deviation: f64 },
}

/// Solves to near machine precision, then checks whether the solution is the
/// uniform vector `(1 − α/2)·e` within `tol` and, if so, whether each peer's
/// upload and download totals agree within `tol · total / n`.
pub fn verify_uniform_solution(
    ledger: &ShareMatrix,
    alpha: f64,
    tol: f64,
) -> Result<UniformCheck, SolverError> {
    let params = BciParams::new(alpha)?.with_stopping(Stopping::InfNormTol(1e-13));
    let result = solve(ledger, &params)?;
    let neutral = neutral_bci(alpha)?;
    let max_deviation = result.x.0.iter().map(|v| (v - neutral).abs()).fold(0.0, f64::max);
    if max_deviation > tol {
        return Ok(UniformCheck::NotUniform { max_deviation });
    }
    let summary = ledger.summary();
    let allowed = tol * summary.total / ledger.n() as f64;
    let worst = summary
        .upload_totals
        .iter()
        .zip(&summary.download_totals)
        .map(|(up, down)| (up - down).abs())
        .enumerate()
        .fold((0, 0.0), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    if worst.1 <= allowed {
        Ok(UniformCheck::UniformAndBalanced)
    } else {
        Ok(UniformCheck::UniformOnly {
            peer: PeerId(worst.0),
            violation: worst.1,
        })
    }
}
